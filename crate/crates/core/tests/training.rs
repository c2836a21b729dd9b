use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tokmask::data::{generate_motif_dataset, LabeledDataset, MotifSpec, TokenSequence, Vocabulary};
use tokmask::explainer::{Explainer, ExplainerConfig, Mode};
use tokmask::explanandum::{Explanandum, ExplanandumConfig};
use tokmask::losses::{total_loss_var, AreaBounds, LossBreakdown, LossVars, LossWeights};
use tokmask::masking::ClassLayout;
use tokmask::tensor::Var;
use tokmask::training::{train_explainer, train_explanandum, ExplainerRun, TrainConfig, TrainHistory};

type Pick = fn(&LossVars) -> Var;

const HEADS: [usize; 2] = [2, 4];

fn spec() -> MotifSpec {
    MotifSpec::random(2, 40, HEADS.to_vec(), 2, 1, 5).unwrap()
}

fn datasets() -> (LabeledDataset, LabeledDataset) {
    let s = spec();
    (
        generate_motif_dataset(&s, 12, 1).unwrap(),
        generate_motif_dataset(&s, 4, 2).unwrap(),
    )
}

fn vocab_size() -> usize {
    Vocabulary::nucleotide(2).unwrap().size()
}

fn frozen_model() -> Explanandum {
    let mut c = ExplanandumConfig::new(vocab_size(), HEADS.to_vec());
    c.embed_dim = 8;
    c.seed = 3;
    let mut m = Explanandum::new(c).unwrap();
    m.freeze();
    m
}

fn explainer(seed: u64) -> Explainer {
    let mut c = ExplainerConfig::new(vocab_size(), HEADS.to_vec());
    c.embed_dim = 6;
    c.hidden = 4;
    c.seed = seed;
    Explainer::new(c).unwrap()
}

fn short_config() -> TrainConfig {
    TrainConfig {
        lr: 0.01,
        batch_size: 8,
        epochs: 3,
        patience: 5,
        seed: 9,
        ..TrainConfig::default()
    }
}

fn weights() -> LossWeights {
    LossWeights {
        entropy: 0.7,
        area: 1.3,
        tv: 0.4,
    }
}

fn weighted_sum(b: &LossBreakdown, w: &LossWeights) -> f64 {
    b.classification + w.entropy * b.entropy + w.area * b.area + w.tv * b.tv
}

fn single_thread<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(f)
}

fn run_explainer() -> ExplainerRun {
    let (train, val) = datasets();
    let model = frozen_model();
    train_explainer(
        explainer(4),
        &model,
        &train,
        &val,
        &weights(),
        &AreaBounds::default(),
        &short_config(),
    )
    .unwrap()
}

/// Epoch records without wall-clock time.
fn comparable(h: &TrainHistory) -> Vec<(usize, Option<u64>, u64, u64)> {
    h.epochs
        .iter()
        .map(|r| {
            (
                r.epoch,
                r.train_loss.map(f64::to_bits),
                r.val_loss.to_bits(),
                r.lr.to_bits(),
            )
        })
        .collect()
}

#[test]
fn every_loss_term_reaches_the_explainer_and_never_the_classifier() {
    let model = frozen_model();
    let e = explainer(1);
    let layout = ClassLayout::new(&HEADS);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let xs: Vec<TokenSequence> = (0..4)
        .map(|_| {
            TokenSequence::new(
                (0..rng.gen_range(3..10))
                    .map(|_| rng.gen_range(3..vocab_size()))
                    .collect(),
            )
        })
        .collect();
    let (train, _) = datasets();
    let terms: [(&str, Pick); 4] = [
        ("L_c", |l| l.classification),
        ("L_e", |l| l.entropy),
        ("L_a", |l| l.area),
        ("L_tv", |l| l.tv),
    ];
    for (name, pick) in terms {
        let mut tape = tokmask::tensor::Tape::new();
        let pe = e.bind(&mut tape);
        let pm = model.bind(&mut tape);
        let refs: Vec<&TokenSequence> = xs.iter().collect();
        let (stacks, _) = e.forward_batch(&mut tape, &pe, &refs, Mode::Train).unwrap();
        let mut parts = Vec::new();
        for (i, (x, s)) in xs.iter().zip(&stacks).enumerate() {
            let y = &train.examples[i].labels;
            let l = total_loss_var(
                &mut tape,
                &model,
                &pm,
                x,
                y,
                *s,
                &layout,
                &LossWeights::default(),
                &AreaBounds::default(),
            )
            .unwrap();
            parts.push(pick(&l));
        }
        let mut sum = parts[0];
        for p in &parts[1..] {
            sum = tape.add(sum, *p).unwrap();
        }
        tape.backward(sum).unwrap();
        let norm: f64 = pe
            .iter()
            .filter_map(|(_, v)| tape.grad(*v))
            .flat_map(|g| g.into_data())
            .map(|g| g * g)
            .sum();
        assert!(norm > 0.0, "{name} gives no explainer gradient");
        for (p, v) in pm.iter() {
            let leaked = tape.grad(*v).map_or(0.0, |g| g.data().iter().map(|x| x * x).sum());
            assert_eq!(leaked, 0.0, "{name} leaks into {p}");
            assert!(!tape.requires_grad(*v));
        }
    }
}

#[test]
fn logged_totals_are_weighted_component_sums() {
    let run = run_explainer();
    let w = weights();
    assert!(!run.steps.is_empty());
    for s in &run.steps {
        let b = LossBreakdown {
            classification: s.classification,
            entropy: s.entropy,
            area: s.area,
            tv: s.tv,
            total: s.total,
        };
        assert!(
            (weighted_sum(&b, &w) - s.total).abs() <= 1e-12 * s.total.abs().max(1.0),
            "step {}",
            s.step
        );
    }
    for b in &run.history.val_breakdowns {
        assert!((weighted_sum(b, &w) - b.total).abs() <= 1e-12 * b.total.abs().max(1.0));
    }
    assert_eq!(run.history.freeze_checks, run.steps.len());
}

#[test]
fn classifier_is_untouched_by_explainer_training() {
    let (train, val) = datasets();
    let model = frozen_model();
    let before = model.params().clone();
    train_explainer(
        explainer(2),
        &model,
        &train,
        &val,
        &LossWeights::default(),
        &AreaBounds::default(),
        &short_config(),
    )
    .unwrap();
    for ((n0, t0), (n1, t1)) in before.iter().zip(model.params().iter()) {
        assert_eq!(n0, n1);
        let bits = |t: &tokmask::tensor::Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(t0), bits(t1), "{n0} changed");
    }
}

#[test]
fn fixed_seed_reproduces_explainer_history() {
    let a = single_thread(run_explainer);
    let b = single_thread(run_explainer);
    assert_eq!(comparable(&a.history), comparable(&b.history));
    assert_eq!(a.history.best_epoch, b.history.best_epoch);
    assert_eq!(a.steps, b.steps);
    assert_eq!(a.explainer.params().hash(), b.explainer.params().hash());
}

#[test]
fn fixed_seed_reproduces_classifier_history() {
    let run = || {
        let (train, val) = datasets();
        let mut c = ExplanandumConfig::new(vocab_size(), HEADS.to_vec());
        c.embed_dim = 8;
        train_explanandum(Explanandum::new(c).unwrap(), &train, &val, &short_config()).unwrap()
    };
    let a = single_thread(run);
    let b = single_thread(run);
    assert_eq!(comparable(&a.history), comparable(&b.history));
    assert_eq!(a.model.params().hash(), b.model.params().hash());
    assert!(!a.model.is_frozen());
}
