//! Balanced accuracy under the masking conditions, mask statistics, an
//! occlusion baseline and heatmap rendering.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Example, LabelAssignment, LabeledDataset, TokenSequence, Vocabulary};
use crate::error::{bail, Result};
use crate::explainer::{Explainer, MaskStack};
use crate::explanandum::Explanandum;
use crate::masking::{
    complement, round_mask, segment_chunks, target_mask, BinaryMask, ClassLayout, SoftMask, ROUND_THRESHOLD,
};

pub const HISTOGRAM_BINS: usize = 10;

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    best
}

pub fn predict(probs: &[Vec<f64>]) -> Vec<usize> {
    probs.iter().map(|p| argmax(p)).collect()
}

/// Mean per-class recall over the classes present in `labels`.
pub fn balanced_accuracy(predictions: &[usize], labels: &[usize], class_count: usize) -> Result<f64> {
    if labels.is_empty() {
        bail!(Data, "balanced accuracy of an empty set");
    }
    if predictions.len() != labels.len() {
        bail!(Data, "{} predictions for {} labels", predictions.len(), labels.len());
    }
    let mut hits = vec![0usize; class_count];
    let mut seen = vec![0usize; class_count];
    for (p, y) in predictions.iter().zip(labels) {
        if *y >= class_count {
            bail!(Data, "label {} outside {} classes", y, class_count);
        }
        seen[*y] += 1;
        hits[*y] += (p == y) as usize;
    }
    let recalls: Vec<f64> = seen
        .iter()
        .zip(&hits)
        .filter(|(n, _)| **n > 0)
        .map(|(n, h)| *h as f64 / *n as f64)
        .collect();
    Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Condition {
    Unmasked,
    Masked,
    Inverted,
    Rounded,
    InvertedRounded,
    RelevantChunks,
    IrrelevantChunks,
}

impl Condition {
    pub const ALL: [Condition; 7] = [
        Condition::Unmasked,
        Condition::Masked,
        Condition::Inverted,
        Condition::Rounded,
        Condition::InvertedRounded,
        Condition::RelevantChunks,
        Condition::IrrelevantChunks,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Condition::Unmasked => "Explanandum",
            Condition::Masked => "Masks",
            Condition::Inverted => "Inverted Masks",
            Condition::Rounded => "Rounded Masks",
            Condition::InvertedRounded => "Inverted Rounded Masks",
            Condition::RelevantChunks => "Average relevant chunk",
            Condition::IrrelevantChunks => "Average not-relevant chunk",
        }
    }

    /// Large-corpus balanced accuracy for the coarsest head, in percent,
    /// printed next to results for orientation only.
    pub fn reference_percent(&self) -> f64 {
        match self {
            Condition::Unmasked => 99.05,
            Condition::Masked => 98.39,
            Condition::Inverted => 46.70,
            Condition::Rounded => 76.42,
            Condition::InvertedRounded => 44.85,
            Condition::RelevantChunks => 69.98,
            Condition::IrrelevantChunks => 47.13,
        }
    }
}

/// Averaged standalone chunk probabilities per head, when the item has
/// chunks of that kind.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkOutcome {
    pub relevant: Option<Vec<Vec<f64>>>,
    pub irrelevant: Option<Vec<Vec<f64>>>,
}

/// Element-wise mean of per-head probability vectors.
pub fn average_probs(items: &[Vec<Vec<f64>>]) -> Option<Vec<Vec<f64>>> {
    let first = items.first()?;
    let mut acc: Vec<Vec<f64>> = first.iter().map(|p| vec![0.0; p.len()]).collect();
    for item in items {
        for (a, p) in acc.iter_mut().zip(item) {
            a.iter_mut().zip(p).for_each(|(a, v)| *a += v);
        }
    }
    let k = items.len() as f64;
    acc.iter_mut().flatten().for_each(|a| *a /= k);
    Some(acc)
}

/// Classifies every chunk of the rounded mask on its own and averages the
/// probabilities within each kind.
pub fn chunk_condition_eval(model: &Explanandum, x: &TokenSequence, b: &BinaryMask) -> Result<ChunkOutcome> {
    let mut relevant = Vec::new();
    let mut irrelevant = Vec::new();
    for chunk in segment_chunks(b, x.valid_len()).0 {
        let piece = TokenSequence::new(x.valid_ids()[chunk.start..chunk.end].to_vec());
        let probs = model.predict_probs(&piece, None)?;
        if chunk.important {
            relevant.push(probs);
        } else {
            irrelevant.push(probs);
        }
    }
    Ok(ChunkOutcome {
        relevant: average_probs(&relevant),
        irrelevant: average_probs(&irrelevant),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionStats {
    pub position: usize,
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskStatistics {
    pub masks: usize,
    pub tokens: usize,
    pub mean: f64,
    pub fraction_above_half: f64,
    pub histogram: Vec<HistogramBin>,
    pub positional: Vec<PositionStats>,
    /// Unmasked (rounded-to-one) chunks per mask.
    pub chunk_counts: Vec<usize>,
    pub chunk_lengths: Vec<usize>,
    pub mean_chunk_count: f64,
    pub mean_chunk_length: f64,
}

pub fn mask_statistics(masks: &[SoftMask]) -> Result<MaskStatistics> {
    if masks.is_empty() {
        bail!(Data, "mask statistics of an empty list");
    }
    let values: Vec<f64> = masks.iter().flat_map(|m| m.valid_values().iter().copied()).collect();
    if values.is_empty() {
        bail!(Data, "masks have no valid positions");
    }
    let tokens = values.len();
    let mean = if values.iter().all(|v| *v == values[0]) {
        values[0]
    } else {
        values.iter().sum::<f64>() / tokens as f64
    };
    let above = values.iter().filter(|v| **v > 0.5).count() as f64 / tokens as f64;

    let mut histogram: Vec<HistogramBin> = (0..HISTOGRAM_BINS)
        .map(|i| HistogramBin {
            lo: i as f64 / HISTOGRAM_BINS as f64,
            hi: (i + 1) as f64 / HISTOGRAM_BINS as f64,
            count: 0,
        })
        .collect();
    for v in &values {
        let bin = ((v * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
        histogram[bin].count += 1;
    }

    let longest = masks.iter().map(|m| m.valid_len()).max().unwrap_or(0);
    let positional = (0..longest)
        .map(|i| {
            let col: Vec<f64> = masks
                .iter()
                .filter(|m| m.valid_len() > i)
                .map(|m| m.values()[i])
                .collect();
            let min = col.iter().copied().fold(f64::INFINITY, f64::min);
            let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let (mean, std) = if min == max {
                (min, 0.0)
            } else {
                let n = col.len() as f64;
                let mean = col.iter().sum::<f64>() / n;
                (mean, (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt())
            };
            PositionStats {
                position: i,
                count: col.len(),
                mean,
                std,
                min,
                max,
            }
        })
        .collect();

    let mut chunk_counts = Vec::with_capacity(masks.len());
    let mut chunk_lengths = Vec::new();
    for m in masks {
        let kept: Vec<usize> = segment_chunks(&round_mask(m, ROUND_THRESHOLD), m.valid_len())
            .0
            .iter()
            .filter(|c| c.important)
            .map(|c| c.len())
            .collect();
        chunk_counts.push(kept.len());
        chunk_lengths.extend(kept);
    }
    let mean_chunk_count = chunk_counts.iter().sum::<usize>() as f64 / chunk_counts.len() as f64;
    let mean_chunk_length = if chunk_lengths.is_empty() {
        0.0
    } else {
        chunk_lengths.iter().sum::<usize>() as f64 / chunk_lengths.len() as f64
    };
    Ok(MaskStatistics {
        masks: masks.len(),
        tokens,
        mean,
        fraction_above_half: above,
        histogram,
        positional,
        chunk_counts,
        chunk_lengths,
        mean_chunk_count,
        mean_chunk_length,
    })
}

/// Area under the ROC curve of `scores` against binary `truth`, with tied
/// scores counted as half.
pub fn auroc(scores: &[f64], truth: &[bool]) -> Result<f64> {
    if scores.len() != truth.len() {
        bail!(Data, "{} scores for {} labels", scores.len(), truth.len());
    }
    let pos = truth.iter().filter(|t| **t).count();
    let neg = truth.len() - pos;
    if pos == 0 || neg == 0 {
        bail!(Data, "AUROC needs both positive and negative items");
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|a, b| scores[*a].total_cmp(&scores[*b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += (i..=j).filter(|k| truth[order[*k]]).count() as f64 * rank;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// How well per-token scores separate flagged tokens from the rest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Separation {
    pub flagged_mean: f64,
    pub background_mean: f64,
    pub gap: f64,
    pub auroc: f64,
}

pub fn separation(scores: &[Vec<f64>], flags: &[Vec<bool>]) -> Result<Separation> {
    let s: Vec<f64> = scores.iter().flatten().copied().collect();
    let f: Vec<bool> = flags.iter().flatten().copied().collect();
    if scores.iter().zip(flags).any(|(a, b)| a.len() != b.len()) || s.len() != f.len() {
        bail!(Data, "scores and flags differ in length");
    }
    let mean_of = |want: bool| {
        let xs: Vec<f64> = s.iter().zip(&f).filter(|(_, g)| **g == want).map(|(v, _)| *v).collect();
        xs.iter().sum::<f64>() / xs.len().max(1) as f64
    };
    let flagged_mean = mean_of(true);
    let background_mean = mean_of(false);
    Ok(Separation {
        flagged_mean,
        background_mean,
        gap: flagged_mean - background_mean,
        auroc: auroc(&s, &f)?,
    })
}

/// Drop in true-class probability, summed over heads, when each token's mask
/// entry is zeroed in turn.
pub fn occlusion_importance(model: &Explanandum, x: &TokenSequence, y: &LabelAssignment) -> Result<Vec<f64>> {
    let z = x.valid_len();
    let x = x.slice(0, z);
    let base = model.predict_probs(&x, None)?;
    let reference: f64 = base.iter().zip(&y.0).map(|(p, c)| p[*c]).sum();
    (0..z)
        .map(|i| {
            let mut values = vec![1.0; z];
            values[i] = 0.0;
            let probs = model.predict_probs(&x, Some(&SoftMask::dense(values)?))?;
            let kept: f64 = probs.iter().zip(&y.0).map(|(p, c)| p[*c]).sum();
            Ok(reference - kept)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionAccuracy {
    pub condition: Condition,
    /// Items contributing to this condition.
    pub items: usize,
    pub per_head: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub head_names: Vec<String>,
    pub head_classes: Vec<usize>,
    pub items: usize,
    pub threshold: f64,
    pub conditions: Vec<ConditionAccuracy>,
    pub statistics: MaskStatistics,
    /// Mask values against planted-motif flags, when the data carries them.
    pub mask_separation: Option<Separation>,
    pub occlusion_items: usize,
    pub occlusion_separation: Option<Separation>,
}

impl EvaluationReport {
    pub fn accuracy(&self, condition: Condition) -> Option<&[f64]> {
        self.conditions
            .iter()
            .find(|c| c.condition == condition)
            .map(|c| c.per_head.as_slice())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn markdown(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "| Condition |");
        for h in &self.head_names {
            let _ = write!(out, " {h} |");
        }
        let _ = writeln!(out, " Reference, coarsest head |");
        let _ = write!(out, "|---|");
        for _ in &self.head_names {
            let _ = write!(out, "---:|");
        }
        let _ = writeln!(out, "---:|");
        for c in &self.conditions {
            let _ = write!(out, "| {} |", c.condition.label());
            for a in &c.per_head {
                let _ = write!(out, " {:.2}% |", 100.0 * a);
            }
            let _ = writeln!(out, " {:.2}% |", c.condition.reference_percent());
        }
        let s = &self.statistics;
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "Mean mask value {:.4}, {:.2}% above 0.5 (reference 0.73 and 67.28%).",
            s.mean,
            100.0 * s.fraction_above_half
        );
        let _ = writeln!(
            out,
            "Unmasked chunks per sequence {:.2}, mean length {:.2} tokens (reference 3.35 and 51.39).",
            s.mean_chunk_count, s.mean_chunk_length
        );
        if let Some(sep) = &self.mask_separation {
            let _ = writeln!(
                out,
                "Mask on motif tokens {:.4} vs background {:.4}, AUROC {:.4}.",
                sep.flagged_mean, sep.background_mean, sep.auroc
            );
        }
        if let Some(sep) = &self.occlusion_separation {
            let _ = writeln!(
                out,
                "Occlusion over {} items: motif {:.4} vs background {:.4}, AUROC {:.4}.",
                self.occlusion_items, sep.flagged_mean, sep.background_mean, sep.auroc
            );
        }
        out
    }

    /// Histogram, positional profile and chunk distributions as CSV files.
    pub fn write_csv_exports(&self, dir: &Path) -> Result<()> {
        let s = &self.statistics;
        let mut w = csv::Writer::from_path(dir.join("histogram.csv"))?;
        for b in &s.histogram {
            w.serialize(b)?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(dir.join("positional.csv"))?;
        for p in &s.positional {
            w.serialize(p)?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(dir.join("chunk_counts.csv"))?;
        w.write_record(["mask", "chunks"])?;
        for (i, c) in s.chunk_counts.iter().enumerate() {
            w.write_record([i.to_string(), c.to_string()])?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(dir.join("chunk_lengths.csv"))?;
        w.write_record(["length"])?;
        for l in &s.chunk_lengths {
            w.write_record([l.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub threshold: f64,
    pub batch_size: usize,
    /// Leading test items scored by occlusion; 0 disables it.
    pub occlusion_items: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            threshold: ROUND_THRESHOLD,
            batch_size: 64,
            occlusion_items: 100,
        }
    }
}

/// Target mask over the valid positions of each item.
pub fn target_masks(model: &Explanandum, stacks: &[MaskStack], items: &[Example]) -> Result<Vec<SoftMask>> {
    let layout = ClassLayout::new(model.head_classes());
    stacks
        .iter()
        .zip(items)
        .map(|(s, e)| {
            let m = target_mask(&s.values, s.valid_len, &layout, &e.labels)?;
            SoftMask::dense(m.valid_values().to_vec())
        })
        .collect()
}

/// Explainer masks for every item, batches explained in parallel.
pub fn explain_all(explainer: &Explainer, items: &[Example], batch_size: usize) -> Result<Vec<MaskStack>> {
    let parts = items
        .par_chunks(batch_size.max(1))
        .map(|chunk| {
            let xs: Vec<_> = chunk.iter().map(|e| &e.tokens).collect();
            explainer.explain_batch(&xs, batch_size)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.into_iter().flatten().collect())
}

/// Per-head predictions for one item under every condition; `None` where an
/// item has no chunk of the required kind.
fn item_predictions(
    model: &Explanandum,
    x: &TokenSequence,
    m: &SoftMask,
    threshold: f64,
) -> Result<Vec<Option<Vec<usize>>>> {
    let x = x.slice(0, x.valid_len());
    let rounded = round_mask(m, threshold);
    let chunks = chunk_condition_eval(model, &x, &rounded)?;
    let with =
        |mask: &SoftMask| -> Result<Option<Vec<usize>>> { Ok(Some(predict(&model.predict_probs(&x, Some(mask))?))) };
    Ok(vec![
        Some(predict(&model.predict_probs(&x, None)?)),
        with(m)?,
        with(&complement(m))?,
        with(&rounded.to_soft())?,
        with(&rounded.inverted().to_soft())?,
        chunks.relevant.as_deref().map(predict),
        chunks.irrelevant.as_deref().map(predict),
    ])
}

/// Scores `masks` (one per test item, valid positions only) under all
/// conditions and summarises them.
pub fn evaluate_masks(
    model: &Explanandum,
    test: &LabeledDataset,
    masks: &[SoftMask],
    head_names: &[String],
    options: &EvalOptions,
) -> Result<EvaluationReport> {
    if test.is_empty() {
        bail!(Data, "empty test set");
    }
    if masks.len() != test.len() {
        bail!(Data, "{} masks for {} items", masks.len(), test.len());
    }
    let heads = model.head_classes().to_vec();
    let preds = test
        .examples
        .par_iter()
        .zip(masks.par_iter())
        .map(|(e, m)| item_predictions(model, &e.tokens, m, options.threshold))
        .collect::<Result<Vec<_>>>()?;

    let mut conditions = Vec::with_capacity(Condition::ALL.len());
    for (k, condition) in Condition::ALL.iter().enumerate() {
        let rows: Vec<(&Vec<usize>, &LabelAssignment)> = preds
            .iter()
            .zip(&test.examples)
            .filter_map(|(p, e)| p[k].as_ref().map(|p| (p, &e.labels)))
            .collect();
        let per_head = if rows.is_empty() {
            vec![f64::NAN; heads.len()]
        } else {
            (0..heads.len())
                .map(|h| {
                    let p: Vec<usize> = rows.iter().map(|(p, _)| p[h]).collect();
                    let y: Vec<usize> = rows.iter().map(|(_, y)| y.0[h]).collect();
                    balanced_accuracy(&p, &y, heads[h])
                })
                .collect::<Result<Vec<_>>>()?
        };
        conditions.push(ConditionAccuracy {
            condition: *condition,
            items: rows.len(),
            per_head,
        });
    }

    let statistics = mask_statistics(masks)?;
    let flags: Option<Vec<Vec<bool>>> = test
        .examples
        .iter()
        .map(|e| e.flags.as_ref().map(|f| f[..e.tokens.valid_len()].to_vec()))
        .collect();
    let mask_separation = match &flags {
        Some(f) => {
            let scores: Vec<Vec<f64>> = masks.iter().map(|m| m.valid_values().to_vec()).collect();
            separation(&scores, f).ok()
        }
        None => None,
    };

    let n_occ = options.occlusion_items.min(test.len());
    let occlusion_separation = match &flags {
        Some(f) if n_occ > 0 => {
            let scores = test.examples[..n_occ]
                .par_iter()
                .map(|e| occlusion_importance(model, &e.tokens, &e.labels))
                .collect::<Result<Vec<_>>>()?;
            separation(&scores, &f[..n_occ]).ok()
        }
        _ => None,
    };

    let head_names = if head_names.len() == heads.len() {
        head_names.to_vec()
    } else {
        (0..heads.len()).map(|h| format!("head{h}")).collect()
    };
    Ok(EvaluationReport {
        head_names,
        head_classes: heads,
        items: test.len(),
        threshold: options.threshold,
        conditions,
        statistics,
        mask_separation,
        occlusion_items: n_occ,
        occlusion_separation,
    })
}

pub fn evaluate_conditions(
    model: &Explanandum,
    explainer: &Explainer,
    test: &LabeledDataset,
    head_names: &[String],
    options: &EvalOptions,
) -> Result<EvaluationReport> {
    if !model.is_frozen() {
        bail!(Model, "evaluation expects a frozen classifier");
    }
    let stacks = explain_all(explainer, &test.examples, options.batch_size)?;
    let masks = target_masks(model, &stacks, &test.examples)?;
    evaluate_masks(model, test, &masks, head_names, options)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RenderFormat {
    Ansi,
    Html,
}

impl FromStr for RenderFormat {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ansi" => Ok(RenderFormat::Ansi),
            "html" => Ok(RenderFormat::Html),
            other => bail!(Config, "unknown render format {:?}, expected ansi or html", other),
        }
    }
}

/// White-to-green scale; 1.0 is the most intense green.
fn green(v: f64) -> (u8, u8, u8) {
    let v = v.clamp(0.0, 1.0);
    let rb = (255.0 * (1.0 - v)).round() as u8;
    let g = (255.0 - 75.0 * v).round() as u8;
    (rb, g, rb)
}

fn escape_html(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Tokens of `x` shaded by mask value. Zero entries are left uncoloured.
pub fn render_mask(x: &TokenSequence, mask: &SoftMask, vocab: &Vocabulary, format: RenderFormat) -> Result<String> {
    let z = x.valid_len();
    if mask.len() < z {
        bail!(Data, "mask of length {} for {} tokens", mask.len(), z);
    }
    let mut out = String::new();
    match format {
        RenderFormat::Ansi => {
            for (id, v) in x.valid_ids().iter().zip(mask.values()) {
                let text = vocab.token_text(*id);
                if *v > 0.0 {
                    let (r, g, b) = green(*v);
                    let _ = write!(out, "\x1b[48;2;{r};{g};{b}m\x1b[30m{text}\x1b[0m");
                } else {
                    out.push_str(&text);
                }
            }
        }
        RenderFormat::Html => {
            out.push_str("<div class=\"mask\" style=\"font-family:monospace;word-break:break-all;line-height:1.6\">");
            for (id, v) in x.valid_ids().iter().zip(mask.values()) {
                let text = escape_html(&vocab.token_text(*id));
                if *v > 0.0 {
                    let (r, g, b) = green(*v);
                    let _ = write!(
                        out,
                        "<span style=\"background-color:rgb({r},{g},{b})\" title=\"{v:.3}\">{text}</span>"
                    );
                } else {
                    let _ = write!(out, "<span title=\"0.000\">{text}</span>");
                }
            }
            out.push_str("</div>");
        }
    }
    Ok(out)
}

/// Rounded variant: kept tokens bold, the rest plain.
pub fn render_rounded(x: &TokenSequence, b: &BinaryMask, vocab: &Vocabulary, format: RenderFormat) -> Result<String> {
    let z = x.valid_len();
    if b.len() < z {
        bail!(Data, "mask of length {} for {} tokens", b.len(), z);
    }
    let mut out = String::new();
    match format {
        RenderFormat::Ansi => {
            for (id, bit) in x.valid_ids().iter().zip(b.bits()) {
                let text = vocab.token_text(*id);
                if *bit == 1 {
                    let _ = write!(out, "\x1b[1m{text}\x1b[0m");
                } else {
                    out.push_str(&text);
                }
            }
        }
        RenderFormat::Html => {
            out.push_str(
                "<div class=\"rounded\" style=\"font-family:monospace;word-break:break-all;line-height:1.6\">",
            );
            for (id, bit) in x.valid_ids().iter().zip(b.bits()) {
                let text = escape_html(&vocab.token_text(*id));
                if *bit == 1 {
                    let _ = write!(
                        out,
                        "<span style=\"font-weight:bold;background-color:rgb(0,180,0)\">{text}</span>"
                    );
                } else {
                    let _ = write!(out, "<span>{text}</span>");
                }
            }
            out.push_str("</div>");
        }
    }
    Ok(out)
}

/// Standalone HTML page around rendered blocks.
pub fn html_document(title: &str, sections: &[(String, String)]) -> String {
    let mut out = String::new();
    let _ = write!(
        out,
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>{}</title></head>\n<body style=\"font-family:sans-serif;max-width:60em;margin:auto\">\n<h1>{}</h1>\n",
        escape_html(title),
        escape_html(title)
    );
    for (heading, body) in sections {
        let _ = writeln!(out, "<section><h3>{}</h3>\n{}\n</section>", escape_html(heading), body);
    }
    out.push_str("</body></html>\n");
    out
}

/// Gallery of soft and rounded masks for the first `limit` items.
pub fn html_gallery(
    items: &[Example],
    masks: &[SoftMask],
    vocab: &Vocabulary,
    threshold: f64,
    limit: usize,
) -> Result<String> {
    let mut sections = Vec::new();
    for (e, m) in items.iter().zip(masks).take(limit) {
        let soft = render_mask(&e.tokens, m, vocab, RenderFormat::Html)?;
        let rounded = render_rounded(&e.tokens, &round_mask(m, threshold), vocab, RenderFormat::Html)?;
        let labels: Vec<String> = e.labels.0.iter().map(|l| l.to_string()).collect();
        sections.push((
            format!("{} (labels {})", e.id, labels.join(", ")),
            format!("{soft}\n{rounded}"),
        ));
    }
    Ok(html_document("Mask gallery", &sections))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::explanandum::{EncoderKind, ExplanandumConfig};

    #[test]
    fn balanced_accuracy_examples() {
        // recalls 9/10, 2/5, 1/2
        let mut p = vec![0; 9];
        p.push(1);
        p.extend([1, 1, 0, 0, 0]);
        p.extend([2, 0]);
        let mut y = vec![0; 10];
        y.extend([1; 5]);
        y.extend([2; 2]);
        assert!((balanced_accuracy(&p, &y, 3).unwrap() - 0.6).abs() < 1e-12);
        assert_eq!(balanced_accuracy(&y, &y, 3).unwrap(), 1.0);
        // class 1 absent: recalls 1/2 and 1
        let got = balanced_accuracy(&[0, 2, 2], &[0, 0, 2], 3).unwrap();
        assert!((got - 0.75).abs() < 1e-12);
        assert!(balanced_accuracy(&[], &[], 3).is_err());
        assert!(balanced_accuracy(&[0], &[3], 3).is_err());
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.1, 0.45, 0.45]), 1);
        let avg = average_probs(&[vec![vec![0.8, 0.2]], vec![vec![0.2, 0.8]]]).unwrap();
        assert_eq!(avg, vec![vec![0.5, 0.5]]);
        assert_eq!(predict(&avg), vec![0]);
    }

    #[test]
    fn statistics_examples() {
        let constant: Vec<SoftMask> = (0..3).map(|_| SoftMask::dense(vec![0.7; 4]).unwrap()).collect();
        let s = mask_statistics(&constant).unwrap();
        assert_eq!(s.mean, 0.7);
        assert_eq!(s.fraction_above_half, 1.0);
        assert!(s.positional.iter().all(|p| p.std == 0.0 && p.min == p.max));
        assert_eq!(s.histogram[7].count, 12);

        let single = mask_statistics(&[SoftMask::dense(vec![1.0, 1.0, 0.0, 0.0, 1.0]).unwrap()]).unwrap();
        assert_eq!(single.chunk_counts, vec![2]);
        assert_eq!(single.chunk_lengths, vec![2, 1]);
        assert_eq!(single.mean, 0.6);
        assert_eq!(single.fraction_above_half, 0.6);
        assert_eq!(single.histogram[0].count, 2);
        assert_eq!(single.histogram[9].count, 3);
        assert!(mask_statistics(&[]).is_err());
    }

    #[test]
    fn statistics_skip_padding() {
        let m = SoftMask::new(vec![1.0, 0.0, 0.0, 0.0], 2).unwrap();
        let s = mask_statistics(&[m, SoftMask::dense(vec![0.0, 1.0, 1.0]).unwrap()]).unwrap();
        assert_eq!(s.tokens, 5);
        assert_eq!(s.positional.len(), 3);
        assert_eq!(s.positional[2].count, 1);
        assert_eq!(s.positional[0].mean, 0.5);
        assert_eq!(s.positional[0].std, 0.5);
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.9, 0.8, 0.2, 0.1], &[false, false, true, true]).unwrap(), 0.0);
        assert_eq!(auroc(&[0.5; 4], &[false, true, false, true]).unwrap(), 0.5);
        // one inversion among 2x2 pairs
        assert_eq!(auroc(&[0.1, 0.6, 0.5, 0.9], &[false, false, true, true]).unwrap(), 0.75);
        assert!(auroc(&[0.1], &[true]).is_err());
    }

    fn bag(seed: u64) -> Explanandum {
        let mut c = ExplanandumConfig::new(20, vec![2, 3]);
        c.embed_dim = 6;
        c.encoder = EncoderKind::None;
        c.seed = seed;
        Explanandum::new(c).unwrap()
    }

    #[test]
    fn single_chunk_matches_whole_sequence() {
        let model = bag(1);
        let x = TokenSequence::new(vec![3, 7, 9, 11, 4]);
        let out = chunk_condition_eval(&model, &x, &BinaryMask::new(vec![1; 5]).unwrap()).unwrap();
        assert_eq!(out.relevant.unwrap(), model.predict_probs(&x, None).unwrap());
        assert!(out.irrelevant.is_none());
    }

    #[test]
    fn chunks_classified_standalone() {
        let model = bag(2);
        let x = TokenSequence::new(vec![3, 7, 9, 11, 4]);
        let out = chunk_condition_eval(&model, &x, &BinaryMask::new(vec![1, 1, 0, 0, 1]).unwrap()).unwrap();
        let a = model.predict_probs(&TokenSequence::new(vec![3, 7]), None).unwrap();
        let b = model.predict_probs(&TokenSequence::new(vec![4]), None).unwrap();
        let c = model.predict_probs(&TokenSequence::new(vec![9, 11]), None).unwrap();
        assert_eq!(out.relevant.unwrap(), average_probs(&[a, b]).unwrap());
        assert_eq!(out.irrelevant.unwrap(), c);
    }

    #[test]
    fn occlusion_of_absent_influence_is_zero() {
        let mut model = bag(3);
        // token 5 gets a zero embedding, so removing it changes only the count
        let emb = model.params_mut().unwrap().get_mut("embedding").unwrap();
        let h = emb.cols();
        emb.data_mut()[5 * h..6 * h].iter_mut().for_each(|v| *v = 0.0);
        let x = TokenSequence::new(vec![5]);
        let s = occlusion_importance(&model, &x, &LabelAssignment(vec![0, 1])).unwrap();
        assert!(s[0].abs() < 1e-12);
    }

    #[test]
    fn render_formats() {
        let vocab = Vocabulary::nucleotide(3).unwrap();
        let x = vocab.tokenize("ACGTTTGGA");
        let zeros = SoftMask::zeros(3);
        let ansi = render_mask(&x, &zeros, &vocab, RenderFormat::Ansi).unwrap();
        assert_eq!(ansi, "ACGTTTGGA");
        let html = render_mask(&x, &zeros, &vocab, RenderFormat::Html).unwrap();
        assert!(!html.contains("background"));
        let ones = render_mask(&x, &SoftMask::ones(3), &vocab, RenderFormat::Html).unwrap();
        assert_eq!(ones.matches("rgb(0,180,0)").count(), 3);
        assert!(render_mask(&x, &SoftMask::ones(3), &vocab, RenderFormat::Ansi)
            .unwrap()
            .contains("48;2;0;180;0m"));
        assert!("svg".parse::<RenderFormat>().is_err());
        let bold = render_rounded(&x, &BinaryMask::new(vec![1, 0, 0]).unwrap(), &vocab, RenderFormat::Ansi).unwrap();
        assert_eq!(bold, "\x1b[1mACG\x1b[0mTTTGGA");
    }

    #[test]
    fn long_sequence_renders_one_block() {
        let vocab = Vocabulary::nucleotide(6).unwrap();
        let seq: String = (0..1500).map(|i| ['A', 'C', 'G', 'T'][(i * 7 + i / 5) % 4]).collect();
        let x = vocab.tokenize(&seq);
        let m = SoftMask::dense((0..250).map(|i| i as f64 / 249.0).collect()).unwrap();
        let html = render_mask(&x, &m, &vocab, RenderFormat::Html).unwrap();
        assert_eq!(html.matches("<div").count(), 1);
        assert_eq!(html.matches("<span").count(), 250);
    }

    proptest::proptest! {
        #[test]
        fn balanced_accuracy_in_unit_interval(
            pairs in proptest::collection::vec((0usize..4, 0usize..4), 1..50)
        ) {
            let (p, y): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let a = balanced_accuracy(&p, &y, 4).unwrap();
            proptest::prop_assert!((0.0..=1.0).contains(&a));
        }
    }
}
