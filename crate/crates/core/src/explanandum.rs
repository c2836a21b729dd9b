//! The classifier being explained: embedding, an optional self-attention
//! mixer, pooling, and one linear head per label level.
//!
//! Masks act on embedding rows. With mean pooling the mask is applied a
//! second time to the encoder outputs, so a fully masked input pools to the
//! zero vector and every head emits exactly its bias.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{LabelAssignment, TokenSequence, CLS};
use crate::error::{bail, Result};
use crate::masking::{apply_mask_var, SoftMask};
use crate::tensor::{uniform, xavier, BoundParams, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    /// Single-head self-attention with a residual connection.
    Attention,
    /// Bag of embeddings.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    Mean,
    Cls,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanandumConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub encoder: EncoderKind,
    pub pooling: Pooling,
    pub head_classes: Vec<usize>,
    pub seed: u64,
}

impl ExplanandumConfig {
    pub fn new(vocab_size: usize, head_classes: Vec<usize>) -> Self {
        ExplanandumConfig {
            vocab_size,
            embed_dim: 32,
            encoder: EncoderKind::Attention,
            pooling: Pooling::Mean,
            head_classes,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= CLS || self.embed_dim == 0 {
            bail!(Config, "explanandum needs vocab > {} and embed_dim > 0", CLS);
        }
        if self.head_classes.is_empty() || self.head_classes.iter().any(|c| *c < 2) {
            bail!(Config, "every head needs at least two classes");
        }
        Ok(())
    }
}

/// Pre-softmax outputs, one vector per head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadLogits(pub Vec<Vec<f64>>);

#[derive(Debug, Clone, PartialEq)]
pub struct Explanandum {
    config: ExplanandumConfig,
    params: ParamStore,
    frozen: bool,
}

fn head_w(h: usize) -> String {
    format!("head{h}.weight")
}

fn head_b(h: usize) -> String {
    format!("head{h}.bias")
}

const ATTN: [&str; 4] = ["attn.q", "attn.k", "attn.v", "attn.o"];

impl Explanandum {
    pub fn new(config: ExplanandumConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let h = config.embed_dim;
        let mut params = ParamStore::new();
        params.insert("embedding", uniform(&[config.vocab_size, h], 1.0, &mut rng));
        if config.encoder == EncoderKind::Attention {
            for name in ATTN {
                params.insert(format!("{name}.weight"), xavier(h, h, &mut rng));
                params.insert(format!("{name}.bias"), uniform(&[h], 0.1, &mut rng));
            }
        }
        for (i, c) in config.head_classes.iter().enumerate() {
            params.insert(head_w(i), xavier(h, *c, &mut rng));
            params.insert(head_b(i), Tensor::zeros(&[*c]));
        }
        Ok(Explanandum {
            config,
            params,
            frozen: false,
        })
    }

    pub fn from_parts(config: ExplanandumConfig, params: ParamStore) -> Result<Self> {
        let reference = Self::new(config.clone())?;
        for (name, t) in reference.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => bail!(
                    Checkpoint,
                    "parameter {} has shape {:?}, expected {:?}",
                    name,
                    p.shape(),
                    t.shape()
                ),
                None => bail!(Checkpoint, "missing parameter {}", name),
            }
        }
        if params.len() != reference.params.len() {
            bail!(Checkpoint, "unexpected extra parameters");
        }
        Ok(Explanandum {
            config,
            params,
            frozen: false,
        })
    }

    pub fn config(&self) -> &ExplanandumConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> Result<&mut ParamStore> {
        if self.frozen {
            bail!(Model, "explanandum is frozen");
        }
        Ok(&mut self.params)
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn head_classes(&self) -> &[usize] {
        &self.config.head_classes
    }

    /// Records parameters on `tape`; frozen models bind as constants.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        self.params.bind(tape, !self.frozen)
    }

    /// `d×h` embedding rows of every id, padding included.
    pub fn embed(&self, x: &TokenSequence) -> Result<Tensor> {
        x.check_vocab(self.config.vocab_size)?;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let e = tape.gather_rows(p.var("embedding"), x.ids())?;
        Ok(tape.value(e).clone())
    }

    /// Differentiable forward pass. `mask`, when given, is a length-`d`
    /// vector on the same tape with values in `[0, 1]`.
    pub fn forward_var(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        x: &TokenSequence,
        mask: Option<Var>,
    ) -> Result<Vec<Var>> {
        x.check_vocab(self.config.vocab_size)?;
        let h = self.config.embed_dim;
        let n = x.valid_len();
        let mask = match mask {
            Some(m) => {
                let mv = tape.value(m);
                if mv.len() != x.len() || mv.shape().len() != 1 {
                    bail!(
                        Data,
                        "mask length {} does not match sequence length {}",
                        mv.len(),
                        x.len()
                    );
                }
                if let Some(v) = mv.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
                    bail!(Data, "mask value {} outside [0, 1]", v);
                }
                if n < x.len() {
                    let col = tape.reshape(m, vec![x.len(), 1])?;
                    let rows: Vec<usize> = (0..n).collect();
                    let g = tape.gather_rows(col, &rows)?;
                    Some(tape.reshape(g, vec![n])?)
                } else {
                    Some(m)
                }
            }
            None => None,
        };

        let pooled = match self.config.pooling {
            Pooling::Mean => {
                if n == 0 {
                    tape.constant(Tensor::zeros(&[h]))
                } else {
                    let mut e = tape.gather_rows(p.var("embedding"), x.valid_ids())?;
                    if let Some(m) = mask {
                        e = apply_mask_var(tape, e, m)?;
                    }
                    let mut z = self.encode(tape, p, e)?;
                    if let Some(m) = mask {
                        z = apply_mask_var(tape, z, m)?;
                    }
                    tape.mean_pool_valid(z, n)?
                }
            }
            Pooling::Cls => {
                let cls = tape.gather_rows(p.var("embedding"), &[CLS])?;
                let e = if n == 0 {
                    cls
                } else {
                    let mut e = tape.gather_rows(p.var("embedding"), x.valid_ids())?;
                    if let Some(m) = mask {
                        e = apply_mask_var(tape, e, m)?;
                    }
                    tape.concat_rows(&[cls, e])?
                };
                let z = self.encode(tape, p, e)?;
                let first = tape.gather_rows(z, &[0])?;
                tape.reshape(first, vec![h])?
            }
        };
        let row = tape.reshape(pooled, vec![1, h])?;
        let mut logits = Vec::with_capacity(self.config.head_classes.len());
        for (i, c) in self.config.head_classes.iter().enumerate() {
            let l = tape.matmul(row, p.var(&head_w(i)))?;
            let l = tape.reshape(l, vec![*c])?;
            logits.push(tape.add(l, p.var(&head_b(i)))?);
        }
        Ok(logits)
    }

    fn encode(&self, tape: &mut Tape, p: &BoundParams, e: Var) -> Result<Var> {
        match self.config.encoder {
            EncoderKind::None => Ok(e),
            EncoderKind::Attention => {
                let proj = |tape: &mut Tape, name: &str, x: Var| -> Result<Var> {
                    let y = tape.matmul(x, p.var(&format!("{name}.weight")))?;
                    Ok(tape.add_row(y, p.var(&format!("{name}.bias")))?)
                };
                let q = proj(tape, "attn.q", e)?;
                let k = proj(tape, "attn.k", e)?;
                let v = proj(tape, "attn.v", e)?;
                let kt = tape.transpose(k)?;
                let scores = tape.matmul(q, kt)?;
                let scores = tape.scale(scores, 1.0 / (self.config.embed_dim as f64).sqrt());
                let attn = tape.softmax(scores);
                let mixed = tape.matmul(attn, v)?;
                let out = proj(tape, "attn.o", mixed)?;
                Ok(tape.add(e, out)?)
            }
        }
    }

    /// Softmax of each head's logits on the tape.
    pub fn probs_var(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        x: &TokenSequence,
        mask: Option<Var>,
    ) -> Result<Vec<Var>> {
        let logits = self.forward_var(tape, p, x, mask)?;
        Ok(logits.into_iter().map(|l| tape.softmax(l)).collect())
    }

    pub fn forward(&self, x: &TokenSequence, mask: Option<&SoftMask>) -> Result<HeadLogits> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let m = mask.map(|m| tape.constant(Tensor::vector(m.values().to_vec())));
        let logits = self.forward_var(&mut tape, &p, x, m)?;
        Ok(HeadLogits(
            logits.iter().map(|l| tape.value(*l).data().to_vec()).collect(),
        ))
    }

    pub fn predict_probs(&self, x: &TokenSequence, mask: Option<&SoftMask>) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let m = mask.map(|m| tape.constant(Tensor::vector(m.values().to_vec())));
        let probs = self.probs_var(&mut tape, &p, x, m)?;
        Ok(probs.iter().map(|l| tape.value(*l).data().to_vec()).collect())
    }
}

/// Summed per-head cross-entropy of logits on the tape.
pub fn explanandum_loss_var(tape: &mut Tape, logits: &[Var], y: &LabelAssignment) -> Result<Var> {
    if logits.len() != y.heads() {
        bail!(Data, "{} heads but {} labels", logits.len(), y.heads());
    }
    let mut total: Option<Var> = None;
    for (l, c) in logits.iter().zip(&y.0) {
        let p = tape.softmax(*l);
        let lp = tape.log(p);
        let pick = tape.index(lp, *c)?;
        let nll = tape.scale(pick, -1.0);
        total = Some(match total {
            Some(t) => tape.add(t, nll)?,
            None => nll,
        });
    }
    total.ok_or_else(|| crate::Error::Data("no heads".into()))
}

/// Sum over heads of `-ln softmax(logits)[y]`.
pub fn explanandum_loss(logits: &HeadLogits, y: &LabelAssignment) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = logits
        .0
        .iter()
        .map(|l| tape.constant(Tensor::vector(l.clone())))
        .collect();
    let loss = explanandum_loss_var(&mut tape, &vars, y)?;
    Ok(tape.value(loss).item()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::PAD;
    use crate::masking::apply_mask;

    fn model(encoder: EncoderKind, pooling: Pooling) -> Explanandum {
        let mut c = ExplanandumConfig::new(19, vec![4, 12]);
        c.embed_dim = 8;
        c.encoder = encoder;
        c.pooling = pooling;
        c.seed = 3;
        Explanandum::new(c).unwrap()
    }

    fn seq() -> TokenSequence {
        TokenSequence::new(vec![4, 9, 17, 4, 12, 3])
    }

    fn softmax(v: &[f64]) -> Vec<f64> {
        let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|x| x / s).collect()
    }

    #[test]
    fn embed_shape_and_identical_rows() {
        let m = model(EncoderKind::Attention, Pooling::Mean);
        let e = m.embed(&seq()).unwrap();
        assert_eq!(e.shape(), &[6, 8]);
        assert_eq!(e.row(0), e.row(3));
        assert!(m.embed(&TokenSequence::new(vec![19])).is_err());
    }

    #[test]
    fn ones_mask_is_identity() {
        for enc in [EncoderKind::Attention, EncoderKind::None] {
            for pool in [Pooling::Mean, Pooling::Cls] {
                let m = model(enc, pool);
                let a = m.forward(&seq(), None).unwrap();
                let b = m.forward(&seq(), Some(&SoftMask::ones(6))).unwrap();
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn zero_mask_mean_pooling_gives_bias() {
        let mut m = model(EncoderKind::Attention, Pooling::Mean);
        // non-zero biases so the check is not vacuous
        for h in 0..2 {
            let b = m.params_mut().unwrap().get_mut(&head_b(h)).unwrap();
            for (i, v) in b.data_mut().iter_mut().enumerate() {
                *v = 0.1 * i as f64 - 0.2;
            }
        }
        let out = m.forward(&seq(), Some(&SoftMask::zeros(6))).unwrap();
        for h in 0..2 {
            assert_eq!(out.0[h], m.params().get(&head_b(h)).unwrap().data());
        }
        let probs = m.predict_probs(&seq(), Some(&SoftMask::zeros(6))).unwrap();
        let empty = m.predict_probs(&TokenSequence::empty(), None).unwrap();
        assert_eq!(probs, empty);
        for (h, p) in probs.iter().enumerate() {
            assert_eq!(*p, softmax(m.params().get(&head_b(h)).unwrap().data()));
        }
    }

    #[test]
    fn single_masking_leaks_through_attention_bias() {
        // Without the second Hadamard, a fully masked input still carries the
        // attention biases into the pooled vector.
        let m = model(EncoderKind::Attention, Pooling::Mean);
        let mut tape = Tape::new();
        let p = m.params.bind(&mut tape, false);
        let e = tape.gather_rows(p.var("embedding"), seq().ids()).unwrap();
        let zeros = tape.constant(Tensor::zeros(&[6]));
        let e = apply_mask_var(&mut tape, e, zeros).unwrap();
        let z = m.encode(&mut tape, &p, e).unwrap();
        let pooled = tape.mean_pool_valid(z, 6).unwrap();
        assert!(tape.value(pooled).data().iter().any(|v| v.abs() > 1e-6));
    }

    #[test]
    fn quarter_mask_scales_row_without_turning_it() {
        let m = model(EncoderKind::Attention, Pooling::Mean);
        let e = m.embed(&seq()).unwrap();
        let mut v = vec![1.0; 6];
        v[2] = 0.25;
        let masked = apply_mask(&e, &SoftMask::dense(v).unwrap()).unwrap();
        let (a, b) = (e.row(2), masked.row(2));
        for (x, y) in a.iter().zip(b) {
            assert_eq!(*y, 0.25 * x);
        }
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((dot / (na * nb) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn probs_sum_to_one() {
        let m = model(EncoderKind::Attention, Pooling::Mean);
        for p in m.predict_probs(&seq(), None).unwrap() {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn padding_excluded() {
        for pool in [Pooling::Mean, Pooling::Cls] {
            let m = model(EncoderKind::Attention, pool);
            let a = m.forward(&seq(), None).unwrap();
            let mut ids = seq().ids().to_vec();
            ids.extend([PAD, PAD]);
            let padded = TokenSequence::padded(ids, 6).unwrap();
            let b = m.forward(&padded, None).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn mask_validation() {
        let m = model(EncoderKind::None, Pooling::Mean);
        assert!(m.forward(&seq(), Some(&SoftMask::ones(5))).is_err());
        let mut tape = Tape::new();
        let p = m.bind(&mut tape);
        let bad = tape.constant(Tensor::vector(vec![1.5; 6]));
        assert!(m.forward_var(&mut tape, &p, &seq(), Some(bad)).is_err());
    }

    #[test]
    fn loss_examples() {
        let uniform = HeadLogits(vec![vec![0.3; 4]]);
        assert!((explanandum_loss(&uniform, &LabelAssignment(vec![2])).unwrap() - 4f64.ln()).abs() < 1e-12);

        let confident = HeadLogits(vec![vec![0.0, 60.0, 0.0]]);
        assert!(explanandum_loss(&confident, &LabelAssignment(vec![1])).unwrap() < 1e-20);

        let two = HeadLogits(vec![vec![0.1, 0.5], vec![1.0, -1.0, 0.3]]);
        let y = LabelAssignment(vec![1, 2]);
        let a = explanandum_loss(&HeadLogits(vec![two.0[0].clone()]), &LabelAssignment(vec![1])).unwrap();
        let b = explanandum_loss(&HeadLogits(vec![two.0[1].clone()]), &LabelAssignment(vec![2])).unwrap();
        assert!((explanandum_loss(&two, &y).unwrap() - (a + b)).abs() < 1e-12);
        assert!(explanandum_loss(&two, &LabelAssignment(vec![1, 3])).is_err());
    }

    #[test]
    fn frozen_binds_as_constants() {
        let mut m = model(EncoderKind::None, Pooling::Mean);
        m.freeze();
        let mut tape = Tape::new();
        let p = m.bind(&mut tape);
        assert!(p.iter().all(|(_, v)| !tape.requires_grad(*v)));
        assert!(m.params_mut().is_err());
    }
}
