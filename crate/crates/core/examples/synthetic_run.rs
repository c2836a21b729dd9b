//! End-to-end run on planted-motif data through the library API.
//!
//! `cargo run --release --example synthetic_run -- [seed]`

use std::time::Instant;

use tokmask::data::{generate_motif_dataset, stratified_split, MotifSpec, Vocabulary};
use tokmask::evaluation::{evaluate_conditions, EvalOptions};
use tokmask::explainer::{Explainer, ExplainerConfig};
use tokmask::explanandum::{Explanandum, ExplanandumConfig};
use tokmask::losses::{AreaBounds, LossWeights};
use tokmask::training::{train_explainer, train_explanandum, TrainConfig};

fn main() -> tokmask::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(7);
    let started = Instant::now();

    let spec = MotifSpec::random(4, 256, vec![4, 12], 3, 2, seed)?;
    let vocab = Vocabulary::nucleotide(spec.k)?;
    let data = generate_motif_dataset(&spec, 200, seed)?;
    let split = stratified_split(&data, 1.0 / 6.0, 0.1, seed)?;
    println!(
        "train {} val {} test {}",
        split.train.len(),
        split.val.len(),
        split.test.len()
    );

    let mut mc = ExplanandumConfig::new(vocab.size(), spec.head_classes.clone());
    mc.seed = seed;
    let cfg = TrainConfig {
        lr: 0.005,
        batch_size: 32,
        epochs: 5,
        seed,
        ..Default::default()
    };
    let run = train_explanandum(Explanandum::new(mc)?, &split.train, &split.val, &cfg)?;
    let mut model = run.model;
    model.freeze();
    println!("classifier trained in {:.1}s", started.elapsed().as_secs_f64());

    let mut ec = ExplainerConfig::new(vocab.size(), spec.head_classes.clone());
    ec.seed = seed;
    let cfg = TrainConfig {
        lr: 0.005,
        batch_size: 32,
        epochs: 20,
        seed,
        ..Default::default()
    };
    let run = train_explainer(
        Explainer::new(ec)?,
        &model,
        &split.train,
        &split.val,
        &LossWeights::default(),
        &AreaBounds::default(),
        &cfg,
    )?;
    println!(
        "explainer trained in {:.1}s, best epoch {}",
        started.elapsed().as_secs_f64(),
        run.history.best_epoch
    );

    let names = vec!["coarse".to_string(), "fine".to_string()];
    let report = evaluate_conditions(&model, &run.explainer, &split.test, &names, &EvalOptions::default())?;
    println!("{}", report.markdown());
    println!("total {:.1}s", started.elapsed().as_secs_f64());
    Ok(())
}
