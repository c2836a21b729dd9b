//! Mask generator: embedding, stacked bidirectional LSTM, ReLU, batch
//! normalization and a sigmoid dense layer with one output per class.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{TokenSequence, PAD};
use crate::error::{bail, Result};
use crate::tensor::{uniform, xavier, BatchStats, BoundParams, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainerConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub bidirectional: bool,
    /// Expose cell states next to hidden states in the per-token features.
    pub concat_cell: bool,
    /// Class counts of every head; the output width is their sum.
    pub head_classes: Vec<usize>,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub seed: u64,
}

impl ExplainerConfig {
    pub fn new(vocab_size: usize, head_classes: Vec<usize>) -> Self {
        ExplainerConfig {
            vocab_size,
            embed_dim: 32,
            hidden: 16,
            layers: 2,
            bidirectional: true,
            concat_cell: true,
            head_classes,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            seed: 0,
        }
    }

    pub fn classes(&self) -> usize {
        self.head_classes.iter().sum()
    }

    fn directions(&self) -> usize {
        if self.bidirectional {
            2
        } else {
            1
        }
    }

    /// Per-token width after concatenating LSTM states.
    pub fn feature_width(&self) -> usize {
        self.directions() * self.hidden * if self.concat_cell { 2 } else { 1 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.embed_dim == 0 || self.hidden == 0 || self.layers == 0 {
            bail!(Config, "explainer dimensions must be positive");
        }
        if self.head_classes.is_empty() || self.head_classes.iter().any(|c| *c < 2) {
            bail!(Config, "every head needs at least two classes");
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) || self.bn_eps <= 0.0 {
            bail!(Config, "invalid batch-norm settings");
        }
        Ok(())
    }
}

/// `d×C` per-token, per-class masks; padded rows are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskStack {
    pub values: Tensor,
    pub valid_len: usize,
}

impl MaskStack {
    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.values.rows()).map(|i| self.values.get(i, c)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm.
    Train,
    /// Running statistics in batch norm.
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Explainer {
    config: ExplainerConfig,
    params: ParamStore,
    /// Batch-norm running mean and variance.
    buffers: ParamStore,
}

const DIRS: [&str; 2] = ["fwd", "bwd"];

fn lstm_name(layer: usize, dir: usize, part: &str) -> String {
    format!("lstm.l{layer}.{}.{part}", DIRS[dir])
}

impl Explainer {
    pub fn new(config: ExplainerConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let h = config.hidden;
        let bound = 1.0 / (h as f64).sqrt();
        let mut params = ParamStore::new();
        params.insert(
            "embedding",
            uniform(&[config.vocab_size, config.embed_dim], 1.0, &mut rng),
        );
        for layer in 0..config.layers {
            let input = if layer == 0 {
                config.embed_dim
            } else {
                config.directions() * h
            };
            for dir in 0..config.directions() {
                params.insert(lstm_name(layer, dir, "w_ih"), uniform(&[input, 4 * h], bound, &mut rng));
                params.insert(lstm_name(layer, dir, "w_hh"), uniform(&[h, 4 * h], bound, &mut rng));
                params.insert(lstm_name(layer, dir, "bias"), uniform(&[4 * h], bound, &mut rng));
            }
        }
        let f = config.feature_width();
        let c = config.classes();
        params.insert("bn.weight", Tensor::full(&[f], 1.0));
        params.insert("bn.bias", Tensor::zeros(&[f]));
        params.insert("dense.weight", xavier(f, c, &mut rng));
        params.insert("dense.bias", Tensor::zeros(&[c]));
        let mut buffers = ParamStore::new();
        buffers.insert("bn.running_mean", Tensor::zeros(&[f]));
        buffers.insert("bn.running_var", Tensor::full(&[f], 1.0));
        Ok(Explainer {
            config,
            params,
            buffers,
        })
    }

    pub fn from_parts(config: ExplainerConfig, params: ParamStore, buffers: ParamStore) -> Result<Self> {
        let reference = Self::new(config.clone())?;
        for (store, want, what) in [
            (&params, &reference.params, "parameter"),
            (&buffers, &reference.buffers, "buffer"),
        ] {
            if store.len() != want.len() {
                bail!(Checkpoint, "expected {} {}s, found {}", want.len(), what, store.len());
            }
            for (name, t) in want.iter() {
                match store.get(name) {
                    Some(p) if p.shape() == t.shape() => {}
                    _ => bail!(Checkpoint, "{} {} missing or misshapen", what, name),
                }
            }
        }
        Ok(Explainer {
            config,
            params,
            buffers,
        })
    }

    pub fn config(&self) -> &ExplainerConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn buffers(&self) -> &ParamStore {
        &self.buffers
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        self.params.bind(tape, true)
    }

    /// Folds batch statistics into the running averages.
    pub fn update_running_stats(&mut self, stats: &BatchStats) {
        let m = self.config.bn_momentum;
        let rm = self.buffers.get_mut("bn.running_mean").expect("buffer");
        for (r, b) in rm.data_mut().iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        let rv = self.buffers.get_mut("bn.running_var").expect("buffer");
        for (r, b) in rv.data_mut().iter_mut().zip(&stats.var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }

    /// Masks for a batch on `tape`: one `valid_len×C` matrix per sequence.
    /// In [`Mode::Train`] the batch statistics are returned as well.
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        batch: &[&TokenSequence],
        mode: Mode,
    ) -> Result<(Vec<Var>, Option<BatchStats>)> {
        if batch.is_empty() {
            bail!(Data, "empty batch");
        }
        for x in batch {
            if x.valid_len() == 0 {
                bail!(Data, "explainer input must contain at least one token");
            }
            x.check_vocab(self.config.vocab_size)?;
        }
        let b = batch.len();
        let t_max = batch.iter().map(|x| x.valid_len()).max().expect("non-empty");
        let h = self.config.hidden;

        // validity of (t, b) and the blend masks for padded steps
        let valid_at = |t: usize| -> Vec<f64> { batch.iter().map(|x| (t < x.valid_len()) as u8 as f64).collect() };
        let all_valid: Vec<bool> = (0..t_max).map(|t| batch.iter().all(|x| t < x.valid_len())).collect();
        let keep: Vec<Option<(Var, Var)>> = (0..t_max)
            .map(|t| {
                if all_valid[t] {
                    None
                } else {
                    let v = valid_at(t);
                    let inv: Vec<f64> = v.iter().map(|x| 1.0 - x).collect();
                    Some((tape.constant(Tensor::vector(v)), tape.constant(Tensor::vector(inv))))
                }
            })
            .collect();

        let mut inputs: Vec<Var> = Vec::with_capacity(t_max);
        for t in 0..t_max {
            let ids: Vec<usize> = batch
                .iter()
                .map(|x| if t < x.valid_len() { x.ids()[t] } else { PAD })
                .collect();
            inputs.push(tape.gather_rows(p.var("embedding"), &ids)?);
        }

        let mut features: Vec<Vec<Var>> = vec![Vec::new(); t_max];
        for layer in 0..self.config.layers {
            let last = layer + 1 == self.config.layers;
            let mut outputs: Vec<Vec<Var>> = vec![Vec::new(); t_max];
            for dir in 0..self.config.directions() {
                let w_ih = p.var(&lstm_name(layer, dir, "w_ih"));
                let w_hh = p.var(&lstm_name(layer, dir, "w_hh"));
                let bias = p.var(&lstm_name(layer, dir, "bias"));
                let mut hs = tape.constant(Tensor::zeros(&[b, h]));
                let mut cs = tape.constant(Tensor::zeros(&[b, h]));
                let order: Vec<usize> = if dir == 0 {
                    (0..t_max).collect()
                } else {
                    (0..t_max).rev().collect()
                };
                for t in order {
                    let xg = tape.matmul(inputs[t], w_ih)?;
                    let hg = tape.matmul(hs, w_hh)?;
                    let g = tape.add(xg, hg)?;
                    let g = tape.add_row(g, bias)?;
                    let i_raw = tape.slice_cols(g, 0, h)?;
                    let f_raw = tape.slice_cols(g, h, 2 * h)?;
                    let g_raw = tape.slice_cols(g, 2 * h, 3 * h)?;
                    let o_raw = tape.slice_cols(g, 3 * h, 4 * h)?;
                    let i = tape.sigmoid(i_raw);
                    let f = tape.sigmoid(f_raw);
                    let gg = tape.tanh(g_raw);
                    let o = tape.sigmoid(o_raw);
                    let fc = tape.mul(f, cs)?;
                    let ig = tape.mul(i, gg)?;
                    let mut c_new = tape.add(fc, ig)?;
                    let tc = tape.tanh(c_new);
                    let mut h_new = tape.mul(o, tc)?;
                    if let Some((on, off)) = keep[t] {
                        let a = tape.scale_rows(h_new, on)?;
                        let z = tape.scale_rows(hs, off)?;
                        h_new = tape.add(a, z)?;
                        let a = tape.scale_rows(c_new, on)?;
                        let z = tape.scale_rows(cs, off)?;
                        c_new = tape.add(a, z)?;
                    }
                    hs = h_new;
                    cs = c_new;
                    outputs[t].push(hs);
                    if last {
                        features[t].push(hs);
                        if self.config.concat_cell {
                            features[t].push(cs);
                        }
                    }
                }
            }
            if !last {
                for (t, outs) in outputs.iter().enumerate() {
                    inputs[t] = if outs.len() == 1 {
                        outs[0]
                    } else {
                        tape.concat_cols(outs)?
                    };
                }
            }
        }

        let per_step = features
            .iter()
            .map(|f| tape.concat_cols(f))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let stacked = tape.concat_rows(&per_step)?;
        let act = tape.relu(stacked);
        let valid_rows: Vec<bool> = (0..t_max)
            .flat_map(|t| batch.iter().map(move |x| t < x.valid_len()))
            .collect();
        let (normed, stats) = match mode {
            Mode::Train => {
                let (y, s) = tape.batch_norm(
                    act,
                    p.var("bn.weight"),
                    p.var("bn.bias"),
                    &valid_rows,
                    self.config.bn_eps,
                )?;
                (y, Some(s))
            }
            Mode::Eval => {
                let rm = self.buffers.get("bn.running_mean").expect("buffer");
                let rv = self.buffers.get("bn.running_var").expect("buffer");
                let neg_mean = tape.constant(Tensor::vector(rm.data().iter().map(|m| -m).collect()));
                let inv_std = tape.constant(Tensor::vector(
                    rv.data()
                        .iter()
                        .map(|v| 1.0 / (v + self.config.bn_eps).sqrt())
                        .collect(),
                ));
                let centered = tape.add_row(act, neg_mean)?;
                let scale = tape.mul(p.var("bn.weight"), inv_std)?;
                let scaled = tape.mul_row(centered, scale)?;
                (tape.add_row(scaled, p.var("bn.bias"))?, None)
            }
        };
        let logits = tape.matmul(normed, p.var("dense.weight"))?;
        let logits = tape.add_row(logits, p.var("dense.bias"))?;
        let masks = tape.sigmoid(logits);

        let mut out = Vec::with_capacity(b);
        for (k, x) in batch.iter().enumerate() {
            let rows: Vec<usize> = (0..x.valid_len()).map(|t| t * b + k).collect();
            out.push(tape.gather_rows(masks, &rows)?);
        }
        Ok((out, stats))
    }

    /// Inference-mode masks for many sequences, processed in batches.
    pub fn explain_batch(&self, xs: &[&TokenSequence], batch_size: usize) -> Result<Vec<MaskStack>> {
        let mut out = Vec::with_capacity(xs.len());
        for chunk in xs.chunks(batch_size.max(1)) {
            let mut tape = Tape::new();
            let p = self.params.bind(&mut tape, false);
            let (vars, _) = self.forward_batch(&mut tape, &p, chunk, Mode::Eval)?;
            for (x, v) in chunk.iter().zip(vars) {
                let c = self.config.classes();
                let mut values = tape.value(v).data().to_vec();
                values.resize(x.len() * c, 0.0);
                out.push(MaskStack {
                    values: Tensor::matrix(x.len(), c, values)?,
                    valid_len: x.valid_len(),
                });
            }
        }
        Ok(out)
    }

    pub fn explain(&self, x: &TokenSequence) -> Result<MaskStack> {
        Ok(self.explain_batch(&[x], 1)?.remove(0))
    }
}
