//! Optimisation loops: classifier pre-training, then explainer training
//! against the frozen classifier.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Example, LabeledDataset};
use crate::error::{bail, Result};
use crate::explainer::{Explainer, Mode};
use crate::explanandum::{explanandum_loss, explanandum_loss_var, Explanandum};
use crate::losses::{total_loss, total_loss_var, AreaBounds, LossBreakdown, LossWeights};
use crate::masking::ClassLayout;
use crate::tensor::{BoundParams, ParamStore, Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.0002,
            batch_size: 48,
            epochs: 50,
            patience: 3,
            weight_decay: 0.0,
            warmup_steps: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            bail!(Config, "learning rate must be positive, got {}", self.lr);
        }
        if self.patience == 0 {
            bail!(Config, "patience must be at least 1");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            bail!(Config, "batch size and epochs must be positive");
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            bail!(Config, "weight decay must be non-negative");
        }
        Ok(())
    }

    /// Learning rate at `step` of `total`: linear warm-up, then cosine decay
    /// over the remaining steps.
    pub fn lr_at(&self, step: usize, total: usize) -> Result<f64> {
        if step < self.warmup_steps {
            return Ok(self.lr * (step + 1) as f64 / self.warmup_steps as f64);
        }
        let span = total.saturating_sub(self.warmup_steps).max(1);
        cosine_lr((step - self.warmup_steps).min(span), span, self.lr)
    }
}

pub fn cosine_lr(step: usize, total_steps: usize, base: f64) -> Result<f64> {
    if total_steps == 0 {
        bail!(Config, "cosine schedule needs at least one step");
    }
    if step > total_steps {
        bail!(Config, "step {} beyond schedule length {}", step, total_steps);
    }
    let progress = step as f64 / total_steps as f64;
    Ok(base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl Adam {
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Updates every parameter that has a gradient. Parameters without one
    /// are left untouched, moments included.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
        weight_decay: f64,
    ) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else {
                bail!(Model, "gradient for unknown parameter {}", name);
            };
            if p.shape() != g.shape() {
                bail!(
                    Model,
                    "gradient shape {:?} for {} of shape {:?}",
                    g.shape(),
                    name,
                    p.shape()
                );
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (((w, gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let update = (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
                *w -= lr * (update + weight_decay * *w);
            }
        }
        Ok(())
    }
}

/// One row of the per-epoch history. Epoch 0 is the state before training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub val_loss: f64,
    pub lr: f64,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    /// Per-epoch validation breakdowns, explainer runs only.
    pub val_breakdowns: Vec<LossBreakdown>,
    /// Steps at which the frozen classifier was verified untouched.
    pub freeze_checks: usize,
}

impl TrainHistory {
    fn push(&mut self, record: EpochRecord) {
        debug_assert!(self.epochs.last().is_none_or(|r| r.epoch < record.epoch));
        self.epochs.push(record);
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.epochs {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Loss breakdown of one explainer optimisation step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    #[serde(rename = "L_c")]
    pub classification: f64,
    #[serde(rename = "L_e")]
    pub entropy: f64,
    #[serde(rename = "L_a")]
    pub area: f64,
    #[serde(rename = "L_tv")]
    pub tv: f64,
    pub total: f64,
    pub lr: f64,
}

pub fn write_steps_csv(steps: &[StepRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for s in steps {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(())
}

pub struct ExplanandumRun {
    pub model: Explanandum,
    pub history: TrainHistory,
}

pub struct ExplainerRun {
    pub explainer: Explainer,
    pub history: TrainHistory,
    pub steps: Vec<StepRecord>,
}

fn grads_of(tape: &Tape, bound: &BoundParams) -> BTreeMap<String, Tensor> {
    bound
        .iter()
        .filter_map(|(name, v)| tape.grad(*v).map(|g| (name.clone(), g)))
        .collect()
}

fn check_finite(what: &str, epoch: usize, step: usize, value: f64) -> Result<()> {
    if !value.is_finite() {
        bail!(Diverged, "{} became {} at epoch {}, step {}", what, value, epoch, step);
    }
    Ok(())
}

fn batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

fn explanandum_val_loss(model: &Explanandum, val: &[Example]) -> Result<f64> {
    let losses = val
        .par_iter()
        .map(|e| explanandum_loss(&model.forward(&e.tokens, None)?, &e.labels))
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Pre-trains the classifier on summed per-head cross-entropy, keeping the
/// parameters with the best validation loss.
pub fn train_explanandum(
    mut model: Explanandum,
    train: &LabeledDataset,
    val: &LabeledDataset,
    config: &TrainConfig,
) -> Result<ExplanandumRun> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        bail!(Data, "training and validation sets must be non-empty");
    }
    if model.is_frozen() {
        bail!(Model, "cannot train a frozen classifier");
    }
    train.check_vocab(model.config().vocab_size)?;
    val.check_vocab(model.config().vocab_size)?;
    if train.head_classes != model.head_classes() || val.head_classes != model.head_classes() {
        bail!(
            Data,
            "dataset heads {:?} do not match the classifier {:?}",
            train.head_classes,
            model.head_classes()
        );
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let per_epoch = train.len().div_ceil(config.batch_size);
    let total = per_epoch * config.epochs;
    let mut adam = Adam::default();
    let mut history = TrainHistory::default();
    let started = Instant::now();

    let mut best_loss = explanandum_val_loss(&model, &val.examples)?;
    let mut best = model.params().clone();
    history.push(EpochRecord {
        epoch: 0,
        train_loss: None,
        val_loss: best_loss,
        lr: config.lr_at(0, total)?,
        wall_secs: 0.0,
    });

    let mut step = 0;
    for epoch in 1..=config.epochs {
        let mut epoch_loss = 0.0;
        let mut lr = 0.0;
        let order = batches(train.len(), config.batch_size, &mut rng);
        for idx in &order {
            let mut tape = Tape::new();
            let p = model.bind(&mut tape);
            let mut losses = Vec::with_capacity(idx.len());
            for &i in idx {
                let e = &train.examples[i];
                let logits = model.forward_var(&mut tape, &p, &e.tokens, None)?;
                losses.push(explanandum_loss_var(&mut tape, &logits, &e.labels)?);
            }
            let mut sum = losses[0];
            for l in &losses[1..] {
                sum = tape.add(sum, *l)?;
            }
            let mean = tape.scale(sum, 1.0 / idx.len() as f64);
            let value = tape.value(mean).item()?;
            check_finite("classifier loss", epoch, step, value)?;
            tape.backward(mean)?;
            let grads = grads_of(&tape, &p);
            lr = config.lr_at(step, total)?;
            adam.step(model.params_mut()?, &grads, lr, config.weight_decay)?;
            epoch_loss += value;
            step += 1;
        }
        let val_loss = explanandum_val_loss(&model, &val.examples)?;
        check_finite("validation loss", epoch, step, val_loss)?;
        log::info!(
            "classifier epoch {epoch}: train {:.4} val {:.4}",
            epoch_loss / order.len() as f64,
            val_loss
        );
        history.push(EpochRecord {
            epoch,
            train_loss: Some(epoch_loss / order.len() as f64),
            val_loss,
            lr,
            wall_secs: started.elapsed().as_secs_f64(),
        });
        if val_loss < best_loss {
            best_loss = val_loss;
            best = model.params().clone();
            history.best_epoch = epoch;
        }
    }
    let model = Explanandum::from_parts(model.config().clone(), best)?;
    Ok(ExplanandumRun { model, history })
}

/// Mean loss breakdown of inference-mode masks over `data`.
pub fn explainer_val_loss(
    explainer: &Explainer,
    model: &Explanandum,
    data: &[Example],
    weights: &LossWeights,
    bounds: &AreaBounds,
    batch_size: usize,
) -> Result<LossBreakdown> {
    if data.is_empty() {
        bail!(Data, "empty evaluation set");
    }
    let xs: Vec<_> = data.iter().map(|e| &e.tokens).collect();
    let stacks = explainer.explain_batch(&xs, batch_size)?;
    let parts = data
        .par_iter()
        .zip(stacks.par_iter())
        .map(|(e, s)| total_loss(model, &e.tokens, &e.labels, s, weights, bounds))
        .collect::<Result<Vec<_>>>()?;
    let mut mean = LossBreakdown::default();
    for p in &parts {
        mean.add_scaled(p, 1.0 / parts.len() as f64);
    }
    Ok(mean)
}

/// Trains the explainer against a frozen classifier, stopping early once the
/// validation total loss has not improved for `patience` epochs.
#[allow(clippy::too_many_arguments)]
pub fn train_explainer(
    mut explainer: Explainer,
    model: &Explanandum,
    train: &LabeledDataset,
    val: &LabeledDataset,
    weights: &LossWeights,
    bounds: &AreaBounds,
    config: &TrainConfig,
) -> Result<ExplainerRun> {
    config.validate()?;
    weights.validate()?;
    bounds.validate()?;
    if !model.is_frozen() {
        bail!(Model, "the classifier must be frozen before explainer training");
    }
    if train.is_empty() || val.is_empty() {
        bail!(Data, "training and validation sets must be non-empty");
    }
    if explainer.config().vocab_size != model.config().vocab_size
        || explainer.config().head_classes != model.head_classes()
    {
        bail!(Config, "explainer and classifier disagree on vocabulary or heads");
    }
    train.check_vocab(model.config().vocab_size)?;
    val.check_vocab(model.config().vocab_size)?;

    let frozen_hash = model.params().hash();
    let layout = ClassLayout::new(model.head_classes());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let per_epoch = train.len().div_ceil(config.batch_size);
    let total = per_epoch * config.epochs;
    let mut adam = Adam::default();
    let mut history = TrainHistory::default();
    let mut steps = Vec::new();
    let started = Instant::now();

    let first = explainer_val_loss(&explainer, model, &val.examples, weights, bounds, config.batch_size)?;
    let mut best_loss = first.total;
    let mut best = explainer.clone();
    history.val_breakdowns.push(first);
    history.push(EpochRecord {
        epoch: 0,
        train_loss: None,
        val_loss: first.total,
        lr: config.lr_at(0, total)?,
        wall_secs: 0.0,
    });

    let mut step = 0;
    let mut stale = 0;
    for epoch in 1..=config.epochs {
        let mut epoch_loss = 0.0;
        let mut lr = 0.0;
        let order = batches(train.len(), config.batch_size, &mut rng);
        for idx in &order {
            let mut tape = Tape::new();
            let pe = explainer.bind(&mut tape);
            let pm = model.bind(&mut tape);
            let xs: Vec<_> = idx.iter().map(|&i| &train.examples[i].tokens).collect();
            let (stacks, stats) = explainer.forward_batch(&mut tape, &pe, &xs, Mode::Train)?;
            let mut totals = Vec::with_capacity(idx.len());
            let mut breakdown = LossBreakdown::default();
            for (&i, s) in idx.iter().zip(&stacks) {
                let e = &train.examples[i];
                let l = total_loss_var(
                    &mut tape, model, &pm, &e.tokens, &e.labels, *s, &layout, weights, bounds,
                )?;
                breakdown.add_scaled(&l.values(&tape), 1.0 / idx.len() as f64);
                totals.push(l.total);
            }
            let mut sum = totals[0];
            for t in &totals[1..] {
                sum = tape.add(sum, *t)?;
            }
            let mean = tape.scale(sum, 1.0 / idx.len() as f64);
            check_finite("explainer loss", epoch, step, breakdown.total)?;
            tape.backward(mean)?;

            for (name, v) in pm.iter() {
                if tape.requires_grad(*v) || tape.grad(*v).is_some() {
                    bail!(Model, "frozen classifier parameter {} received a gradient", name);
                }
            }
            history.freeze_checks += 1;

            let grads = grads_of(&tape, &pe);
            lr = config.lr_at(step, total)?;
            adam.step(explainer.params_mut(), &grads, lr, config.weight_decay)?;
            if let Some(stats) = stats {
                explainer.update_running_stats(&stats);
            }
            steps.push(StepRecord {
                step,
                classification: breakdown.classification,
                entropy: breakdown.entropy,
                area: breakdown.area,
                tv: breakdown.tv,
                total: breakdown.total,
                lr,
            });
            epoch_loss += breakdown.total;
            step += 1;
        }
        if model.params().hash() != frozen_hash {
            bail!(Model, "classifier parameters changed during explainer training");
        }

        let v = explainer_val_loss(&explainer, model, &val.examples, weights, bounds, config.batch_size)?;
        check_finite("validation loss", epoch, step, v.total)?;
        log::info!(
            "explainer epoch {epoch}: train {:.4} val {:.4} (L_c {:.4} L_e {:.4} L_a {:.4} L_tv {:.4})",
            epoch_loss / order.len() as f64,
            v.total,
            v.classification,
            v.entropy,
            v.area,
            v.tv
        );
        history.val_breakdowns.push(v);
        history.push(EpochRecord {
            epoch,
            train_loss: Some(epoch_loss / order.len() as f64),
            val_loss: v.total,
            lr,
            wall_secs: started.elapsed().as_secs_f64(),
        });
        if v.total < best_loss {
            best_loss = v.total;
            best = explainer.clone();
            history.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                log::info!("early stop after epoch {epoch}");
                history.stopped_early = true;
                break;
            }
        }
    }
    Ok(ExplainerRun {
        explainer: best,
        history,
        steps,
    })
}
