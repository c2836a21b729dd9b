"""Smoke test for the Python bindings.

Build the extension first:

    cargo build -p tokmask-python --release
    python3 python/smoke_test.py

If `tokmask` is not importable, the script loads target/release/libtokmask.so.
"""

import importlib.util
import math
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent

TINY = """
seed = 3

[data]
k = 2
sequence_bases = 40
classes = [2, 4]
motif_tokens = 2
plantings = 1
n_per_class = 16

[explanandum]
embed_dim = 8

[explanandum_training]
lr = 0.01
batch_size = 16
epochs = 2

[explainer]
embed_dim = 8
hidden = 4

[explainer_training]
lr = 0.01
batch_size = 16
epochs = 2

[evaluation]
occlusion_items = 4
gallery_items = 2
"""


def import_tokmask(scratch):
    if importlib.util.find_spec("tokmask") is None:
        built = ROOT / "target" / "release" / "libtokmask.so"
        if not built.exists():
            sys.exit(f"{built} not found; run `cargo build -p tokmask-python --release`")
        shutil.copy(built, scratch / "tokmask.so")
        sys.path.insert(0, str(scratch))
    import tokmask

    return tokmask


def check_primitives(tm):
    vocab = tm.Vocabulary(3)
    ids = vocab.tokenize("ACGTTGCAN")
    assert len(ids) == 3 and vocab.detokenize(ids[:2]) == "ACGTTG"
    assert vocab.size == 4**3 + 3

    assert tm.round_mask([0.2, 0.5, 0.9, 0.49]) == [0, 1, 1, 0]
    assert tm.segment_chunks([1, 1, 0, 1]) == [(0, 2, True), (2, 3, False), (3, 4, True)]

    rows = tm.apply_mask([[1.0, -2.0], [3.0, 4.0]], [0.25, 1.0])
    assert rows == [[0.25, -0.5], [3.0, 4.0]]

    # Ten tokens, bounds 0.2 and 0.5: two to five ones cost nothing.
    assert tm.bounding_measure([1, 1, 1, 0, 0, 0, 0, 0, 0, 0], 0.2, 0.5) == 0.0
    assert tm.bounding_measure([1] * 10, 0.2, 0.5) > 0.0

    uniform = tm.entropy_loss([[0.25] * 4])
    assert math.isclose(uniform, -math.log(4) / 4)
    assert tm.tv_loss([0.5] * 6, [0.1] * 6) == 0.0
    assert math.isclose(tm.balanced_accuracy([0, 0, 1, 1], [0, 1, 1, 1], 2), (1.0 + 2 / 3) / 2)
    assert tm.auroc([0.9, 0.1, 0.8, 0.3], [True, False, True, False]) == 1.0

    stats = tm.mask_statistics([[0.9, 0.8, 0.1], [0.2, 0.7]])
    assert stats["tokens"] == 5 and stats["chunk_counts"] == [1, 1]

    try:
        tm.round_mask([1.5])
    except tm.TokmaskError:
        pass
    else:
        raise AssertionError("out-of-range mask accepted")


def check_pipeline(tm, scratch):
    cfg = scratch / "tiny.toml"
    cfg.write_text(TINY)
    d = {name: scratch / name for name in ("data", "clf", "expl", "eval")}
    steps = [
        ["gen-data", "--config", cfg, "--out", d["data"]],
        ["train-explanandum", "--config", cfg, "--data", d["data"], "--out", d["clf"]],
        ["train-explainer", "--config", cfg, "--data", d["data"],
         "--explanandum", d["clf"] / "explanandum.json", "--out", d["expl"]],
        ["evaluate", "--config", cfg, "--data", d["data"], "--explanandum", d["clf"] / "explanandum.json",
         "--explainer", d["expl"] / "explainer.json", "--out", d["eval"]],
    ]
    for step in steps:
        code = tm.run([str(a) for a in step])
        assert code == 0, f"{step[0]} exited with {code}"
    assert tm.run(["no-such-command"]) == 2

    model = tm.Explanandum.load(d["clf"] / "explanandum.json")
    explainer = tm.Explainer.load(d["expl"] / "explainer.json")
    vocab = tm.Vocabulary(2)
    assert model.vocab_hash == vocab.hash()

    ids = vocab.tokenize("ACGTACGTTTGGCCAAACGTACGTTTGGCCAAACGTACGT")
    stack = explainer.explain(ids)
    assert len(stack) == len(ids) and all(len(r) == explainer.classes == 6 for r in stack)
    assert all(0.0 < v < 1.0 for row in stack for v in row)

    plain = model.predict_probs(ids)
    assert model.predict_probs(ids, [1.0] * len(ids)) == plain
    assert [len(p) for p in plain] == model.head_classes == [2, 4]
    assert model.predict_probs(ids, [0.0] * len(ids)) == model.predict_probs([], None)

    mask = explainer.target_mask(model, ids, [0, 1])
    assert len(mask) == len(ids)
    html = vocab.render_html(ids, mask)
    assert html.count("<span") == len(ids)
    assert len(model.occlusion(ids, [0, 1])) == len(ids)

    report = tm.EvaluationReport.load(d["eval"] / "report.json")
    assert len(report.conditions()) == 7
    assert report.accuracy("masked") == report.accuracy("Masks")
    assert report.to_dict()["head_names"] == report.head_names
    assert "| Masks |" in report.markdown()


def main():
    with tempfile.TemporaryDirectory() as tmp:
        scratch = Path(tmp)
        tm = import_tokmask(scratch)
        check_primitives(tm)
        check_pipeline(tm, scratch)
    print("python smoke test: ok")


if __name__ == "__main__":
    main()
