//! Explainer objective: classification, entropy, area and total-variation
//! terms and their weighted sum.

use serde::{Deserialize, Serialize};

use crate::data::{LabelAssignment, TokenSequence};
use crate::error::{bail, Result};
use crate::explainer::MaskStack;
use crate::explanandum::Explanandum;
use crate::masking::{nontarget_mask_var, target_mask_var, ClassLayout, SoftMask};
use crate::tensor::{BoundParams, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub entropy: f64,
    pub area: f64,
    pub tv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            entropy: 1.0,
            area: 1.0,
            tv: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("entropy", self.entropy), ("area", self.area), ("tv", self.tv)] {
            if !(w >= 0.0 && w.is_finite()) {
                bail!(Config, "loss weight {} must be a non-negative number, got {}", name, w);
            }
        }
        Ok(())
    }
}

/// Minimum and maximum mask area as fractions of the sequence length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AreaBounds {
    pub min: f64,
    pub max: f64,
}

impl Default for AreaBounds {
    fn default() -> Self {
        AreaBounds { min: 0.1, max: 0.5 }
    }
}

impl AreaBounds {
    pub fn new(min: f64, max: f64) -> Result<Self> {
        let b = AreaBounds { min, max };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.min && self.min < self.max && self.max < 1.0) {
            bail!(
                Config,
                "area bounds need 0 < min < max < 1, got {} and {}",
                self.min,
                self.max
            );
        }
        Ok(())
    }

    /// Leading ones in the minimum and maximum templates for length `z`,
    /// rounded half up.
    pub fn template_counts(&self, z: usize) -> (usize, usize) {
        let lo = (self.min * z as f64 + 0.5).floor() as usize;
        let hi = (self.max * z as f64 + 0.5).floor() as usize;
        (lo.min(hi), hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub classification: f64,
    pub entropy: f64,
    pub area: f64,
    pub tv: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn add_scaled(&mut self, other: &LossBreakdown, k: f64) {
        self.classification += k * other.classification;
        self.entropy += k * other.entropy;
        self.area += k * other.area;
        self.tv += k * other.tv;
        self.total += k * other.total;
    }
}

/// Loss terms as tape values.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub classification: Var,
    pub entropy: Var,
    pub area: Var,
    pub tv: Var,
    pub total: Var,
}

impl LossVars {
    pub fn values(&self, tape: &Tape) -> LossBreakdown {
        let get = |v: Var| tape.value(v).data()[0];
        LossBreakdown {
            classification: get(self.classification),
            entropy: get(self.entropy),
            area: get(self.area),
            tv: get(self.tv),
            total: get(self.total),
        }
    }
}

fn sum_vars(tape: &mut Tape, vars: &[Var]) -> Result<Var> {
    let mut it = vars.iter();
    let mut acc = *it.next().ok_or_else(|| crate::Error::Data("nothing to sum".into()))?;
    for v in it {
        acc = tape.add(acc, *v)?;
    }
    Ok(acc)
}

fn vector_len(tape: &Tape, v: Var) -> Result<usize> {
    match tape.shape(v) {
        [n] => Ok(*n),
        s => bail!(Data, "expected a mask vector, got shape {:?}", s),
    }
}

/// Sum over heads of `-ln p[y]`.
pub fn classification_loss_var(tape: &mut Tape, probs: &[Var], y: &LabelAssignment) -> Result<Var> {
    if probs.len() != y.heads() {
        bail!(Data, "{} heads but {} labels", probs.len(), y.heads());
    }
    let mut terms = Vec::with_capacity(probs.len());
    for (p, c) in probs.iter().zip(&y.0) {
        let lp = tape.log(*p);
        let pick = tape.index(lp, *c)?;
        terms.push(tape.scale(pick, -1.0));
    }
    sum_vars(tape, &terms)
}

/// Mean over heads of `(1/C) Σ p ln p`, with `0 ln 0 = 0`.
pub fn entropy_loss_var(tape: &mut Tape, probs: &[Var]) -> Result<Var> {
    let mut terms = Vec::with_capacity(probs.len());
    for p in probs {
        let c = vector_len(tape, *p)?;
        let lp = tape.log(*p);
        let plp = tape.mul(*p, lp)?;
        let s = tape.sum(plp);
        terms.push(tape.scale(s, 1.0 / c as f64));
    }
    let total = sum_vars(tape, &terms)?;
    Ok(tape.scale(total, 1.0 / probs.len() as f64))
}

/// Mean mask value over the (unpadded) vector.
pub fn area_mean_var(tape: &mut Tape, m: Var) -> Result<Var> {
    if vector_len(tape, m)? == 0 {
        bail!(Data, "area of an empty mask");
    }
    Ok(tape.mean(m)?)
}

/// Penalty for a class mask whose descending-sorted values fall short of the
/// minimum-area template or exceed the maximum-area template.
pub fn bounding_measure_var(tape: &mut Tape, s: Var, bounds: &AreaBounds) -> Result<Var> {
    bounds.validate()?;
    let z = vector_len(tape, s)?;
    if z == 0 {
        bail!(Data, "bounding measure of an empty mask");
    }
    let (lo, hi) = bounds.template_counts(z);
    let q_min = tape.constant(Tensor::vector((0..z).map(|i| (i < lo) as u8 as f64).collect()));
    let q_max = tape.constant(Tensor::vector((0..z).map(|i| (i < hi) as u8 as f64).collect()));
    let (q, _) = tape.sort_descending(s)?;
    let short = tape.sub(q_min, q)?;
    let short = tape.relu(short);
    let over = tape.sub(q, q_max)?;
    let over = tape.relu(over);
    let both = tape.add(short, over)?;
    let total = tape.sum(both);
    Ok(tape.scale(total, 1.0 / z as f64))
}

/// `A(m) + A(n) + mean of B(s_c)` over the true-class columns.
pub fn area_loss_var(tape: &mut Tape, m: Var, n: Var, true_columns: &[Var], bounds: &AreaBounds) -> Result<Var> {
    if true_columns.is_empty() {
        bail!(Data, "no true classes");
    }
    let am = area_mean_var(tape, m)?;
    let an = area_mean_var(tape, n)?;
    let mut bs = Vec::with_capacity(true_columns.len());
    for s in true_columns {
        bs.push(bounding_measure_var(tape, *s, bounds)?);
    }
    let b = sum_vars(tape, &bs)?;
    let b = tape.scale(b, 1.0 / true_columns.len() as f64);
    sum_vars(tape, &[am, an, b])
}

fn neighbour_variation(tape: &mut Tape, v: Var, z: usize) -> Result<Var> {
    let col = tape.reshape(v, vec![z, 1])?;
    let head: Vec<usize> = (0..z - 1).collect();
    let tail: Vec<usize> = (1..z).collect();
    let a = tape.gather_rows(col, &head)?;
    let b = tape.gather_rows(col, &tail)?;
    let d = tape.sub(a, b)?;
    let d = tape.abs(d);
    Ok(tape.sum(d))
}

/// `(1/Z) Σ |m[i]-m[i+1]| + (1/Z) Σ |n[i]-n[i+1]|`.
pub fn tv_loss_var(tape: &mut Tape, m: Var, n: Var) -> Result<Var> {
    let z = vector_len(tape, m)?;
    if vector_len(tape, n)? != z {
        bail!(Data, "target and non-target masks differ in length");
    }
    if z == 0 {
        bail!(Data, "total variation of an empty mask");
    }
    if z == 1 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let a = neighbour_variation(tape, m, z)?;
    let b = neighbour_variation(tape, n, z)?;
    let s = tape.add(a, b)?;
    Ok(tape.scale(s, 1.0 / z as f64))
}

/// Full objective for one sequence. `stack` is the sequence's `Z×C` mask
/// stack over its valid tokens; `model_params` binds the classifier.
#[allow(clippy::too_many_arguments)]
pub fn total_loss_var(
    tape: &mut Tape,
    model: &Explanandum,
    model_params: &BoundParams,
    x: &TokenSequence,
    y: &LabelAssignment,
    stack: Var,
    layout: &ClassLayout,
    weights: &LossWeights,
    bounds: &AreaBounds,
) -> Result<LossVars> {
    weights.validate()?;
    let z = x.valid_len();
    if tape.shape(stack) != [z, layout.total()] {
        bail!(
            Data,
            "mask stack shape {:?} does not match {}×{}",
            tape.shape(stack),
            z,
            layout.total()
        );
    }
    let x = x.slice(0, z);
    let m = target_mask_var(tape, stack, layout, y)?;
    let n = nontarget_mask_var(tape, stack, layout, y)?;
    let m_inv = tape.one_minus(m);

    let probs_m = model.probs_var(tape, model_params, &x, Some(m))?;
    let probs_inv = model.probs_var(tape, model_params, &x, Some(m_inv))?;
    let classification = classification_loss_var(tape, &probs_m, y)?;
    let entropy = entropy_loss_var(tape, &probs_inv)?;

    let true_cols = layout
        .true_columns(y)?
        .into_iter()
        .map(|c| tape.column(stack, c))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let area = area_loss_var(tape, m, n, &true_cols, bounds)?;
    let tv = tv_loss_var(tape, m, n)?;

    let e = tape.scale(entropy, weights.entropy);
    let a = tape.scale(area, weights.area);
    let t = tape.scale(tv, weights.tv);
    let total = sum_vars(tape, &[classification, e, a, t])?;
    Ok(LossVars {
        classification,
        entropy,
        area,
        tv,
        total,
    })
}

fn scalar_of(build: impl FnOnce(&mut Tape) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let v = build(&mut tape)?;
    Ok(tape.value(v).item()?)
}

fn prob_vars(tape: &mut Tape, probs: &[Vec<f64>]) -> Vec<Var> {
    probs.iter().map(|p| tape.constant(Tensor::vector(p.clone()))).collect()
}

pub fn classification_loss(probs: &[Vec<f64>], y: &LabelAssignment) -> Result<f64> {
    scalar_of(|t| {
        let v = prob_vars(t, probs);
        classification_loss_var(t, &v, y)
    })
}

pub fn entropy_loss(probs: &[Vec<f64>]) -> Result<f64> {
    scalar_of(|t| {
        let v = prob_vars(t, probs);
        entropy_loss_var(t, &v)
    })
}

/// Mean over the valid positions of a mask.
pub fn area_mean(m: &SoftMask) -> Result<f64> {
    scalar_of(|t| {
        let v = t.constant(Tensor::vector(m.valid_values().to_vec()));
        area_mean_var(t, v)
    })
}

pub fn bounding_measure(s: &[f64], bounds: &AreaBounds) -> Result<f64> {
    scalar_of(|t| {
        let v = t.constant(Tensor::vector(s.to_vec()));
        bounding_measure_var(t, v, bounds)
    })
}

pub fn area_loss(m: &SoftMask, n: &SoftMask, true_columns: &[Vec<f64>], bounds: &AreaBounds) -> Result<f64> {
    scalar_of(|t| {
        let mv = t.constant(Tensor::vector(m.valid_values().to_vec()));
        let nv = t.constant(Tensor::vector(n.valid_values().to_vec()));
        let cols: Vec<Var> = true_columns
            .iter()
            .map(|c| t.constant(Tensor::vector(c[..m.valid_len()].to_vec())))
            .collect();
        area_loss_var(t, mv, nv, &cols, bounds)
    })
}

pub fn tv_loss(m: &SoftMask, n: &SoftMask) -> Result<f64> {
    scalar_of(|t| {
        let mv = t.constant(Tensor::vector(m.valid_values().to_vec()));
        let nv = t.constant(Tensor::vector(n.valid_values().to_vec()));
        tv_loss_var(t, mv, nv)
    })
}

/// Objective for one sequence and its mask stack, as plain numbers.
pub fn total_loss(
    model: &Explanandum,
    x: &TokenSequence,
    y: &LabelAssignment,
    stack: &MaskStack,
    weights: &LossWeights,
    bounds: &AreaBounds,
) -> Result<LossBreakdown> {
    let layout = ClassLayout::new(model.head_classes());
    let z = x.valid_len();
    let c = layout.total();
    let valid: Vec<f64> = stack.values.data()[..z * c].to_vec();
    let mut tape = Tape::new();
    let p = model.params().bind(&mut tape, false);
    let s = tape.constant(Tensor::matrix(z, c, valid)?);
    let vars = total_loss_var(&mut tape, model, &p, x, y, s, &layout, weights, bounds)?;
    Ok(vars.values(&tape))
}
