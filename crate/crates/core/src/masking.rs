//! Target, complement and non-target masks, embedding-level masking, and the
//! rounded and chunked variants used in evaluation.

use serde::{Deserialize, Serialize};

use crate::data::LabelAssignment;
use crate::error::{bail, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Default rounding threshold; values at the threshold round up.
pub const ROUND_THRESHOLD: f64 = 0.5;

/// Per-token mask in `[0, 1]` whose padded tail is zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftMask {
    values: Vec<f64>,
    valid_len: usize,
}

impl SoftMask {
    pub fn new(values: Vec<f64>, valid_len: usize) -> Result<Self> {
        if valid_len > values.len() {
            bail!(Data, "valid_len {} exceeds mask length {}", valid_len, values.len());
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            bail!(Data, "mask value {} outside [0, 1]", v);
        }
        if values[valid_len..].iter().any(|v| *v != 0.0) {
            bail!(Data, "mask is non-zero on padding");
        }
        Ok(SoftMask { values, valid_len })
    }

    /// Unpadded mask.
    pub fn dense(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Self::new(values, n)
    }

    pub fn ones(len: usize) -> Self {
        SoftMask {
            values: vec![1.0; len],
            valid_len: len,
        }
    }

    pub fn zeros(len: usize) -> Self {
        SoftMask {
            values: vec![0.0; len],
            valid_len: len,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn valid_values(&self) -> &[f64] {
        &self.values[..self.valid_len]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn valid_len(&self) -> usize {
        self.valid_len
    }
}

/// Mask of exact zeros and ones.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryMask {
    bits: Vec<u8>,
}

impl BinaryMask {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if bits.iter().any(|b| *b > 1) {
            bail!(Data, "binary mask values must be 0 or 1");
        }
        Ok(BinaryMask { bits })
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn to_soft(&self) -> SoftMask {
        SoftMask::dense(self.bits.iter().map(|b| *b as f64).collect()).expect("0/1 values")
    }

    pub fn inverted(&self) -> BinaryMask {
        BinaryMask {
            bits: self.bits.iter().map(|b| 1 - b).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub start: usize,
    pub end: usize,
    pub important: bool,
}

impl Chunk {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

/// Maximal runs of equal rounded values; half-open, ordered, alternating.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkSegmentation(pub Vec<Chunk>);

/// Column layout of a mask stack: all heads' classes concatenated in head
/// order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassLayout {
    head_classes: Vec<usize>,
    offsets: Vec<usize>,
}

impl ClassLayout {
    pub fn new(head_classes: &[usize]) -> Self {
        let mut offsets = Vec::with_capacity(head_classes.len());
        let mut acc = 0;
        for c in head_classes {
            offsets.push(acc);
            acc += c;
        }
        ClassLayout {
            head_classes: head_classes.to_vec(),
            offsets,
        }
    }

    pub fn total(&self) -> usize {
        self.head_classes.iter().sum()
    }

    pub fn head_classes(&self) -> &[usize] {
        &self.head_classes
    }

    pub fn column(&self, head: usize, class: usize) -> usize {
        self.offsets[head] + class
    }

    /// One column per head: that head's true class.
    pub fn true_columns(&self, y: &LabelAssignment) -> Result<Vec<usize>> {
        y.check(&self.head_classes)?;
        Ok(y.0.iter().enumerate().map(|(h, c)| self.column(h, *c)).collect())
    }

    pub fn other_columns(&self, y: &LabelAssignment) -> Result<Vec<usize>> {
        let t = self.true_columns(y)?;
        let rest: Vec<usize> = (0..self.total()).filter(|c| !t.contains(c)).collect();
        if rest.is_empty() {
            bail!(Data, "no non-target classes");
        }
        Ok(rest)
    }
}

fn max_of_columns(tape: &mut Tape, stack: Var, cols: &[usize]) -> Result<Var> {
    let vars = cols
        .iter()
        .map(|c| tape.column(stack, *c))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(tape.max_reduce(&vars)?)
}

/// Elementwise max over the true-class columns of a `d×C` stack.
pub fn target_mask_var(tape: &mut Tape, stack: Var, layout: &ClassLayout, y: &LabelAssignment) -> Result<Var> {
    max_of_columns(tape, stack, &layout.true_columns(y)?)
}

/// Elementwise max over all other columns.
pub fn nontarget_mask_var(tape: &mut Tape, stack: Var, layout: &ClassLayout, y: &LabelAssignment) -> Result<Var> {
    max_of_columns(tape, stack, &layout.other_columns(y)?)
}

/// Scales row `i` of `embeddings` by `mask[i]`.
pub fn apply_mask_var(tape: &mut Tape, embeddings: Var, mask: Var) -> Result<Var> {
    let h = tape.value(embeddings).cols();
    let rows = tape.value(embeddings).rows();
    let n = tape.value(mask).len();
    if n != rows {
        bail!(Data, "mask length {} does not match {} embedding rows", n, rows);
    }
    let rep = tape.repeat_column(mask, h)?;
    Ok(tape.mul(embeddings, rep)?)
}

fn stack_tensor(stack: &Tensor, layout: &ClassLayout) -> Result<()> {
    if stack.cols() != layout.total() || stack.shape().len() != 2 {
        bail!(
            Data,
            "mask stack has shape {:?}, expected d×{}",
            stack.shape(),
            layout.total()
        );
    }
    Ok(())
}

fn max_columns_values(stack: &Tensor, cols: &[usize], valid_len: usize) -> Vec<f64> {
    (0..stack.rows())
        .map(|i| {
            if i >= valid_len {
                0.0
            } else {
                cols.iter().map(|c| stack.get(i, *c)).fold(f64::NEG_INFINITY, f64::max)
            }
        })
        .collect()
}

/// Target mask `m` from a `d×C` stack; padded rows are zero.
pub fn target_mask(stack: &Tensor, valid_len: usize, layout: &ClassLayout, y: &LabelAssignment) -> Result<SoftMask> {
    stack_tensor(stack, layout)?;
    SoftMask::new(
        max_columns_values(stack, &layout.true_columns(y)?, valid_len),
        valid_len,
    )
}

/// Non-target mask `n`.
pub fn nontarget_mask(stack: &Tensor, valid_len: usize, layout: &ClassLayout, y: &LabelAssignment) -> Result<SoftMask> {
    stack_tensor(stack, layout)?;
    SoftMask::new(
        max_columns_values(stack, &layout.other_columns(y)?, valid_len),
        valid_len,
    )
}

/// `1 - m` on valid positions; padding stays zero.
pub fn complement(m: &SoftMask) -> SoftMask {
    let values = m
        .values
        .iter()
        .enumerate()
        .map(|(i, v)| if i < m.valid_len { 1.0 - v } else { 0.0 })
        .collect();
    SoftMask {
        values,
        valid_len: m.valid_len,
    }
}

/// Row-scaled copy of a `d×h` embedding matrix.
pub fn apply_mask(embeddings: &Tensor, m: &SoftMask) -> Result<Tensor> {
    if embeddings.rows() != m.len() || embeddings.shape().len() != 2 {
        bail!(
            Data,
            "mask length {} does not match {} embedding rows",
            m.len(),
            embeddings.rows()
        );
    }
    let h = embeddings.cols();
    let mut data = embeddings.data().to_vec();
    for (row, s) in data.chunks_mut(h.max(1)).zip(m.values()) {
        row.iter_mut().for_each(|x| *x *= s);
    }
    Ok(Tensor::new(embeddings.shape().to_vec(), data)?)
}

/// `1` where `m >= threshold`, else `0`; padding rounds to 0.
pub fn round_mask(m: &SoftMask, threshold: f64) -> BinaryMask {
    BinaryMask {
        bits: m
            .values
            .iter()
            .enumerate()
            .map(|(i, v)| (i < m.valid_len && *v >= threshold) as u8)
            .collect(),
    }
}

/// Maximal runs of equal values over the first `valid_len` entries.
pub fn segment_chunks(b: &BinaryMask, valid_len: usize) -> ChunkSegmentation {
    let bits = &b.bits[..valid_len.min(b.bits.len())];
    let mut chunks = Vec::new();
    let mut start = 0;
    for i in 1..=bits.len() {
        if i == bits.len() || bits[i] != bits[start] {
            chunks.push(Chunk {
                start,
                end: i,
                important: bits[start] == 1,
            });
            start = i;
        }
    }
    ChunkSegmentation(chunks)
}
