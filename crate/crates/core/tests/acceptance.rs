//! Acceptance checks, one PASS/FAIL line per criterion.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tokmask::checkpoint::Checkpoint;
use tokmask::cli::dispatch;
use tokmask::data::{LabelAssignment, LabelDictionary, LabeledDataset, TokenSequence};
use tokmask::evaluation::{mask_statistics, Condition, EvaluationReport};
use tokmask::explainer::{Explainer, ExplainerConfig};
use tokmask::explanandum::{EncoderKind, Explanandum, ExplanandumConfig, Pooling};
use tokmask::losses::{bounding_measure, entropy_loss, total_loss_var, tv_loss, AreaBounds, LossVars, LossWeights};
use tokmask::masking::{apply_mask, segment_chunks, BinaryMask, ClassLayout, SoftMask};
use tokmask::tensor::{gradcheck, Tensor, TensorError, Var};
use tokmask::training::{train_explainer, TrainConfig};

type Pick = fn(&LossVars) -> Var;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn argv(parts: &[&str]) -> Vec<String> {
    std::iter::once("tokmask")
        .chain(parts.iter().copied())
        .map(String::from)
        .collect()
}

fn quickstart() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/quickstart.toml")
}

fn run_pipeline(config: &Path, root: &Path, seed: &str, extra: &[&str]) -> bool {
    let p = |s: &str| root.join(s).to_string_lossy().into_owned();
    let cfg = config.to_string_lossy().into_owned();
    let (data, clf, expl, eval) = (p("data"), p("clf"), p("expl"), p("eval"));
    let (ckpt_m, ckpt_e) = (p("clf/explanandum.json"), p("expl/explainer.json"));
    let steps: [Vec<&str>; 4] = [
        vec!["gen-data", "--config", &cfg, "--seed", seed, "--out", &data],
        vec![
            "train-explanandum",
            "--config",
            &cfg,
            "--seed",
            seed,
            "--data",
            &data,
            "--out",
            &clf,
        ],
        vec![
            "train-explainer",
            "--config",
            &cfg,
            "--seed",
            seed,
            "--data",
            &data,
            "--explanandum",
            &ckpt_m,
            "--out",
            &expl,
        ],
        vec![
            "evaluate",
            "--config",
            &cfg,
            "--data",
            &data,
            "--explanandum",
            &ckpt_m,
            "--explainer",
            &ckpt_e,
            "--out",
            &eval,
        ],
    ];
    steps.iter().all(|s| {
        let mut args = s.clone();
        args.extend_from_slice(extra);
        dispatch(&argv(&args)) == 0
    })
}

fn gradient_correctness() -> Outcome {
    let started = Instant::now();
    let terms: [(&str, Pick); 5] = [
        ("L_c", |l| l.classification),
        ("L_e", |l| l.entropy),
        ("L_a", |l| l.area),
        ("L_tv", |l| l.tv),
        ("total", |l| l.total),
    ];
    let mut worst = 0.0f64;
    let instances = 24;
    for seed in 0..instances as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let total_c = rng.gen_range(2..=6usize);
        let heads = if total_c >= 4 && rng.gen_bool(0.5) {
            let first = rng.gen_range(2..=total_c - 2);
            vec![first, total_c - first]
        } else {
            vec![total_c]
        };
        let mut c = ExplanandumConfig::new(15, heads.clone());
        c.embed_dim = 4;
        c.encoder = if seed % 3 == 2 {
            EncoderKind::None
        } else {
            EncoderKind::Attention
        };
        c.pooling = if seed % 2 == 0 { Pooling::Mean } else { Pooling::Cls };
        c.seed = seed;
        let model = Explanandum::new(c).unwrap();
        let layout = ClassLayout::new(&heads);
        let d = rng.gen_range(1..=8usize);
        let x = TokenSequence::new((0..d).map(|_| rng.gen_range(3..15)).collect());
        let y = LabelAssignment(heads.iter().map(|k| rng.gen_range(0..*k)).collect());
        let s = Tensor::matrix(
            d,
            total_c,
            (0..d * total_c).map(|_| rng.gen_range(0.02..0.98)).collect(),
        )
        .unwrap();
        let bounds = AreaBounds::new(rng.gen_range(0.05..0.3), rng.gen_range(0.35..0.9)).unwrap();
        for (_, pick) in terms {
            let check = gradcheck::check(
                |tape, v| {
                    let p = model.params().bind(tape, false);
                    let l = total_loss_var(
                        tape,
                        &model,
                        &p,
                        &x,
                        &y,
                        v[0],
                        &layout,
                        &LossWeights::default(),
                        &bounds,
                    )
                    .map_err(|e| TensorError::Invalid {
                        op: "loss",
                        msg: e.to_string(),
                    })?;
                    Ok(pick(&l))
                },
                std::slice::from_ref(&s),
                1e-5,
            )
            .unwrap();
            worst = worst.max(check.max_rel_error);
        }
    }
    let secs = started.elapsed().as_secs_f64();
    outcome(
        worst < 1e-4 && secs < 60.0,
        format!("{instances} instances x 5 terms, max rel error {worst:.2e}, {secs:.1}s"),
    )
}

fn loss_unit_values() -> Outcome {
    let le = entropy_loss(&[vec![0.25; 4]]).unwrap();
    let le_ok = (le + 4f64.ln() / 4.0).abs() <= 1e-9;
    let c = SoftMask::dense(vec![0.4; 7]).unwrap();
    let tv_ok = tv_loss(&c, &SoftMask::dense(vec![0.9; 7]).unwrap()).unwrap() == 0.0;
    let b = AreaBounds::new(0.1, 0.3).unwrap();
    let b1 = bounding_measure(&[1.0; 10], &b).unwrap();
    let b0 = bounding_measure(&[0.0; 10], &b).unwrap();
    let b_ok = (b1 - 0.7).abs() <= 1e-9 && (b0 - 0.1).abs() <= 1e-9;

    // brute force: only the count of ones matters for a binary input
    let mut enum_ok = true;
    let mut cases = 0;
    for bounds in [b, AreaBounds::default(), AreaBounds::new(0.25, 0.75).unwrap()] {
        for z in 1..=8usize {
            let lo = (bounds.min * z as f64 + 0.5).floor() as usize;
            let hi = (bounds.max * z as f64 + 0.5).floor() as usize;
            let lo = lo.min(hi);
            for pattern in 0u32..(1 << z) {
                let s: Vec<f64> = (0..z).map(|i| ((pattern >> i) & 1) as f64).collect();
                let k = pattern.count_ones() as usize;
                let want = (lo.saturating_sub(k) + k.saturating_sub(hi)) as f64 / z as f64;
                let got = bounding_measure(&s, &bounds).unwrap();
                enum_ok &= (got - want).abs() < 1e-12 && ((lo..=hi).contains(&k) == (got == 0.0));
                cases += 1;
            }
        }
    }
    outcome(
        le_ok && tv_ok && b_ok && enum_ok,
        format!("L_e(uniform4) = {le:.12}, B(ones) = {b1}, B(zeros) = {b0}, {cases} binary vectors enumerated"),
    )
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn masking_mechanics(trained: &Explanandum) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = TokenSequence::new((0..20).map(|_| rng.gen_range(3..trained.config().vocab_size)).collect());
    let e = trained.embed(&x).unwrap();
    let m = SoftMask::dense((0..20).map(|_| rng.gen_range(1e-3..1.0)).collect()).unwrap();
    let scaled = apply_mask(&e, &m).unwrap();
    let worst_cos = (0..20)
        .map(|i| (cosine(e.row(i), scaled.row(i)) - 1.0).abs())
        .fold(0.0, f64::max);

    let mut bitwise = true;
    for enc in [EncoderKind::Attention, EncoderKind::None] {
        for pool in [Pooling::Mean, Pooling::Cls] {
            let mut c = trained.config().clone();
            c.encoder = enc;
            c.pooling = pool;
            let model = if enc == EncoderKind::Attention && pool == Pooling::Mean {
                trained.clone()
            } else {
                Explanandum::new(c).unwrap()
            };
            bitwise &= model.forward(&x, None).unwrap() == model.forward(&x, Some(&SoftMask::ones(20))).unwrap();
        }
    }

    let masked = trained.forward(&x, Some(&SoftMask::zeros(20))).unwrap();
    let empty = trained.forward(&TokenSequence::empty(), None).unwrap();
    let biases_nonzero = (0..trained.head_classes().len()).any(|h| {
        trained
            .params()
            .get(&format!("head{h}.bias"))
            .unwrap()
            .data()
            .iter()
            .any(|b| *b != 0.0)
    });
    let exact = masked == empty;
    outcome(
        worst_cos <= 1e-12 && bitwise && exact && biases_nonzero,
        format!(
            "max |cos-1| = {worst_cos:.1e}, all-ones bitwise = {bitwise}, zero-mask == empty = {exact} (trained biases non-zero = {biases_nonzero})"
        ),
    )
}

fn pct(v: f64) -> f64 {
    100.0 * v
}

fn directional(report: &EvaluationReport) -> Outcome {
    let acc = |c| report.accuracy(c).unwrap().to_vec();
    let (un, ma, inv, ro, rel, irr) = (
        acc(Condition::Unmasked),
        acc(Condition::Masked),
        acc(Condition::Inverted),
        acc(Condition::Rounded),
        acc(Condition::RelevantChunks),
        acc(Condition::IrrelevantChunks),
    );
    let mut pass = report.items >= 380;
    let mut parts = Vec::new();
    for (h, k) in report.head_classes.iter().enumerate() {
        let chance = 100.0 / *k as f64;
        let ok_mask = pct(ma[h]) >= pct(un[h]) - 5.0;
        let ok_inv = pct(inv[h]) <= chance + 15.0;
        let ok_round = inv[h] <= ro[h] && ro[h] <= ma[h];
        let ok_chunk = pct(rel[h]) - pct(irr[h]) >= 20.0;
        pass &= ok_mask && ok_inv && ok_round && ok_chunk;
        parts.push(format!(
            "K={k}: unmasked {:.1} masked {:.1} inverted {:.1} (limit {:.1}) rounded {:.1} chunks {:.1}/{:.1}",
            pct(un[h]),
            pct(ma[h]),
            pct(inv[h]),
            chance + 15.0,
            pct(ro[h]),
            pct(rel[h]),
            pct(irr[h])
        ));
    }
    outcome(pass, format!("{} test items; {}", report.items, parts.join("; ")))
}

fn faithfulness(report: &EvaluationReport) -> Outcome {
    match &report.mask_separation {
        Some(s) => outcome(
            s.gap >= 0.2 && s.auroc >= 0.8,
            format!(
                "motif {:.3} vs background {:.3} (gap {:.3}), AUROC {:.4}",
                s.flagged_mean, s.background_mean, s.gap, s.auroc
            ),
        ),
        None => outcome(false, "no ground-truth flags in test data"),
    }
}

fn freeze_contract(run: &Path, before_hash: &str) -> Outcome {
    let after = Checkpoint::load(&run.join("clf/explanandum.json"))
        .unwrap()
        .into_explanandum()
        .unwrap();
    let file_ok = after.params().hash() == before_hash;

    // a short library run to count the per-step assertions
    let data = run.join("data");
    let labels = LabelDictionary::load(&data.join("labels.json")).unwrap();
    let heads = labels.head_classes();
    let mut train = LabeledDataset::read_jsonl(&data.join("train.jsonl"), heads.clone()).unwrap();
    train.examples.truncate(96);
    let mut val = LabeledDataset::read_jsonl(&data.join("val.jsonl"), heads.clone()).unwrap();
    val.examples.truncate(32);
    let hash = after.params().hash();
    let mut c = ExplainerConfig::new(labels.vocab.size(), heads);
    c.seed = 11;
    let cfg = TrainConfig {
        lr: 0.005,
        batch_size: 16,
        epochs: 2,
        patience: 5,
        seed: 11,
        ..Default::default()
    };
    let r = train_explainer(
        Explainer::new(c).unwrap(),
        &after,
        &train,
        &val,
        &LossWeights::default(),
        &AreaBounds::default(),
        &cfg,
    )
    .unwrap();
    let steps_ok = r.history.freeze_checks == r.steps.len() && !r.steps.is_empty();
    let lib_ok = after.params().hash() == hash;

    let unfrozen = Explanandum::from_parts(after.config().clone(), after.params().clone()).unwrap();
    let refused = train_explainer(
        Explainer::new(ExplainerConfig::new(labels.vocab.size(), labels.head_classes())).unwrap(),
        &unfrozen,
        &train,
        &val,
        &LossWeights::default(),
        &AreaBounds::default(),
        &cfg,
    )
    .is_err();
    outcome(
        file_ok && steps_ok && lib_ok && refused,
        format!(
            "hash unchanged across CLI run = {file_ok}, across library run = {lib_ok}, {} of {} steps asserted, unfrozen model refused = {refused}",
            r.history.freeze_checks,
            r.steps.len()
        ),
    )
}

fn determinism(root: &Path) -> Outcome {
    let cfg = root.join("small.toml");
    let text = fs::read_to_string(quickstart()).unwrap();
    let mut config: tokmask::cli::PipelineConfig = toml::from_str(&text).unwrap();
    config.data.n_per_class = 15;
    config.explanandum_training.epochs = 2;
    config.explainer_training.epochs = 2;
    config.evaluation.occlusion_items = 10;
    fs::write(&cfg, toml::to_string(&config).unwrap()).unwrap();
    let (a, b) = (root.join("a"), root.join("b"));
    let ok_runs = run_pipeline(&cfg, &a, "21", &[]) && run_pipeline(&cfg, &b, "21", &["--threads", "1"]);
    if !ok_runs {
        return outcome(false, "pipeline run failed");
    }
    let files = [
        "data/train.jsonl",
        "data/val.jsonl",
        "data/test.jsonl",
        "data/labels.json",
        "data/motifs.json",
        "clf/explanandum.json",
        "expl/explainer.json",
        "eval/report.json",
    ];
    let differing: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| fs::read(a.join(f)).unwrap() != fs::read(b.join(f)).unwrap())
        .collect();
    outcome(
        differing.is_empty(),
        format!("{} artifacts compared, differing: {:?}", files.len(), differing),
    )
}

fn statistics_plumbing() -> Outcome {
    let s = mask_statistics(&[SoftMask::dense(vec![1.0, 1.0, 0.0, 0.0, 1.0]).unwrap()]).unwrap();
    let single =
        s.chunk_counts == vec![2] && s.chunk_lengths == vec![2, 1] && s.mean == 0.6 && s.fraction_above_half == 0.6;
    let constant: Vec<SoftMask> = (0..4).map(|_| SoftMask::dense(vec![0.7; 6]).unwrap()).collect();
    let c = mask_statistics(&constant).unwrap();
    let flat = c.mean == 0.7 && c.fraction_above_half == 1.0 && c.positional.iter().all(|p| p.std == 0.0);
    let mixed = mask_statistics(&[
        SoftMask::dense(vec![0.2, 0.8, 0.6]).unwrap(),
        SoftMask::new(vec![0.9, 0.4, 0.0], 2).unwrap(),
    ])
    .unwrap();
    // (0.2+0.8+0.6+0.9+0.4)/5 = 0.58; above 0.5: 0.8, 0.6, 0.9
    let hand = (mixed.mean - 0.58).abs() < 1e-15
        && mixed.fraction_above_half == 0.6
        && mixed.chunk_counts == vec![1, 1]
        && mixed.chunk_lengths == vec![2, 1];

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut partition = true;
    for _ in 0..2000 {
        let n = rng.gen_range(0..40);
        let valid = rng.gen_range(0..=n);
        let bits: Vec<u8> = (0..n)
            .map(|i| if i < valid { rng.gen_range(0..2) } else { 0 })
            .collect();
        let seg = segment_chunks(&BinaryMask::new(bits.clone()).unwrap(), valid);
        let mut next = 0;
        let mut last: Option<bool> = None;
        for ch in &seg.0 {
            partition &= ch.start == next && ch.end > ch.start && last != Some(ch.important);
            partition &= bits[ch.start..ch.end].iter().all(|b| (*b == 1) == ch.important);
            next = ch.end;
            last = Some(ch.important);
        }
        partition &= next == valid;
    }
    outcome(
        single && flat && hand && partition,
        format!(
            "hand-built examples = {}, 2000 random segmentations partition = {partition}",
            single && flat && hand
        ),
    )
}

fn main() {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let started = Instant::now();
    let root = tempfile::tempdir().unwrap();
    let main_run = root.path().join("main");
    let pipeline_ok = run_pipeline(&quickstart(), &main_run, "7", &[]);
    let report = pipeline_ok
        .then(|| EvaluationReport::from_json(&fs::read_to_string(main_run.join("eval/report.json")).unwrap()).unwrap());
    let trained = pipeline_ok.then(|| Checkpoint::load(&main_run.join("clf/explanandum.json")).unwrap());
    let before_hash = trained.as_ref().map(|c| c.params_hash.clone());
    let trained = trained.map(|c| c.into_explanandum().unwrap());
    let pipeline_secs = started.elapsed().as_secs_f64();

    let failed = || outcome(false, "quick-start pipeline failed");
    let results = [
        ("gradient correctness", gradient_correctness()),
        ("loss unit values", loss_unit_values()),
        (
            "masking mechanics",
            trained.as_ref().map_or_else(failed, masking_mechanics),
        ),
        (
            "directional reproduction",
            report.as_ref().map_or_else(failed, directional),
        ),
        ("oracle faithfulness", report.as_ref().map_or_else(failed, faithfulness)),
        (
            "freeze contract",
            before_hash
                .as_deref()
                .map_or_else(failed, |h| freeze_contract(&main_run, h)),
        ),
        ("determinism", determinism(root.path())),
        ("statistics plumbing", statistics_plumbing()),
    ];

    println!();
    for (i, (name, r)) in results.iter().enumerate() {
        println!(
            "{} [{}] {}: {}",
            if r.pass { "PASS" } else { "FAIL" },
            i + 1,
            name,
            r.detail
        );
    }
    if let Some(r) = &report {
        let un = r.accuracy(Condition::Unmasked).unwrap();
        println!(
            "info: quick-start pipeline {:.0}s, unmasked test accuracy {:?}",
            pipeline_secs,
            un.iter().map(|a| format!("{:.2}%", pct(*a))).collect::<Vec<_>>()
        );
    }
    println!("info: total {:.0}s", started.elapsed().as_secs_f64());
    let failures = results.iter().filter(|(_, r)| !r.pass).count();
    if failures > 0 {
        eprintln!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
