use super::{Result, Tensor, TensorError};

/// Lower clamp applied inside `log`.
pub const LOG_CLAMP: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    ScaleRows(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    SoftmaxRows(Var),
    Sum(Var),
    Mean(Var),
    MeanPoolValid(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize),
    Column(Var, usize),
    Reshape(Var),
    RepeatColumn(Var),
    MaxReduce(Vec<Var>, Vec<usize>),
    Sort(Var, Vec<usize>),
    Index(Var, usize),
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        valid: Vec<bool>,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Batch statistics produced by [`Tape::batch_norm`], used to update
/// running averages.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance over the valid rows.
    pub var: Vec<f64>,
}

/// Linear record of operations in creation order. Every operation's inputs
/// precede it, so a reverse sweep is a valid topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn mismatch(op: &'static str, expected: &[usize], got: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        expected: expected.to_vec(),
        got: got.to_vec(),
    }
}

fn need_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(TensorError::Invalid {
            op,
            msg: format!("expected a matrix, got shape {s:?}"),
        }),
    }
}

fn need_vector(op: &'static str, t: &Tensor) -> Result<usize> {
    match t.shape() {
        [n] => Ok(*n),
        s => Err(TensorError::Invalid {
            op,
            msg: format!("expected a vector, got shape {s:?}"),
        }),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op: if requires_grad { op } else { Op::Leaf },
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` root with respect to `v`. `None` for
    /// values that do not require gradients.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.val(a);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| f(*x)).collect()).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    /// `a[i][j] + b[j]` for an `r×c` matrix and a length-`c` vector.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = need_matrix("add_row", self.val(a))?;
        let n = need_vector("add_row", self.val(b))?;
        if n != c {
            return Err(mismatch("add_row", &[c], &[n]));
        }
        let (ta, tb) = (self.val(a), self.val(b));
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(c) {
            for (x, y) in row.iter_mut().zip(tb.data()) {
                *x += y;
            }
        }
        let t = Tensor::new(vec![r, c], data)?;
        Ok(self.push(t, Op::AddRow(a, b), &[a, b]))
    }

    /// `a[i][j] * b[j]`: column-wise scaling.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = need_matrix("mul_row", self.val(a))?;
        let n = need_vector("mul_row", self.val(b))?;
        if n != c {
            return Err(mismatch("mul_row", &[c], &[n]));
        }
        let (ta, tb) = (self.val(a), self.val(b));
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(c) {
            for (x, y) in row.iter_mut().zip(tb.data()) {
                *x *= y;
            }
        }
        let t = Tensor::new(vec![r, c], data)?;
        Ok(self.push(t, Op::MulRow(a, b), &[a, b]))
    }

    /// `a[i][j] * s[i]`: row-wise scaling.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let (r, c) = need_matrix("scale_rows", self.val(a))?;
        let n = need_vector("scale_rows", self.val(s))?;
        if n != r {
            return Err(mismatch("scale_rows", &[r], &[n]));
        }
        let (ta, ts) = (self.val(a), self.val(s));
        let mut data = ta.data().to_vec();
        for (row, k) in data.chunks_mut(c.max(1)).zip(ts.data()) {
            for x in row.iter_mut() {
                *x *= k;
            }
        }
        let t = Tensor::new(vec![r, c], data)?;
        Ok(self.push(t, Op::ScaleRows(a, s), &[a, s]))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let t = self.map(a, |x| x * k);
        self.push(t, Op::Scale(a, k), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let t = self.map(a, |x| x + k);
        self.push(t, Op::AddScalar(a), &[a])
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let n = self.scale(a, -1.0);
        self.add_scalar(n, 1.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = need_matrix("matmul", self.val(a))?;
        let (k2, m) = need_matrix("matmul", self.val(b))?;
        if k != k2 {
            return Err(mismatch("matmul", &[k, m], &[k2, m]));
        }
        let (ta, tb) = (self.val(a).data(), self.val(b).data());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let x = ta[i * k + p];
                if x == 0.0 {
                    continue;
                }
                for (o, y) in orow.iter_mut().zip(&tb[p * m..(p + 1) * m]) {
                    *o += x * y;
                }
            }
        }
        let t = Tensor::new(vec![n, m], out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = need_matrix("transpose", self.val(a))?;
        let src = self.val(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let t = Tensor::new(vec![c, r], out)?;
        Ok(self.push(t, Op::Transpose(a), &[a]))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.map(a, sigmoid);
        self.push(t, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.map(a, f64::tanh);
        self.push(t, Op::Tanh(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| x.max(0.0));
        self.push(t, Op::Relu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.map(a, f64::exp);
        self.push(t, Op::Exp(a), &[a])
    }

    /// Natural log with the input clamped at [`LOG_CLAMP`].
    pub fn log(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| x.max(LOG_CLAMP).ln());
        self.push(t, Op::Log(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let t = self.map(a, f64::abs);
        self.push(t, Op::Abs(a), &[a])
    }

    /// Softmax over the last axis (each row of a matrix, or the whole vector).
    pub fn softmax(&mut self, a: Var) -> Var {
        let ta = self.val(a);
        let c = ta.cols();
        let mut data = ta.data().to_vec();
        if c > 0 {
            for row in data.chunks_mut(c) {
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for x in row.iter_mut() {
                    *x = (*x - mx).exp();
                    s += *x;
                }
                for x in row.iter_mut() {
                    *x /= s;
                }
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::SoftmaxRows(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.val(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.val(a);
        if t.is_empty() {
            return Err(TensorError::Invalid {
                op: "mean",
                msg: "empty tensor".into(),
            });
        }
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        Ok(self.push(Tensor::scalar(s), Op::Mean(a), &[a]))
    }

    /// Column means over the first `valid_count` rows of a `d×h` matrix.
    pub fn mean_pool_valid(&mut self, x: Var, valid_count: usize) -> Result<Var> {
        let (d, h) = need_matrix("mean_pool_valid", self.val(x))?;
        if valid_count == 0 || valid_count > d {
            return Err(TensorError::Invalid {
                op: "mean_pool_valid",
                msg: format!("valid_count {valid_count} outside 1..={d}"),
            });
        }
        let src = self.val(x).data();
        let mut out = vec![0.0; h];
        for row in src.chunks(h.max(1)).take(valid_count) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let inv = 1.0 / valid_count as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        Ok(self.push(Tensor::vector(out), Op::MeanPoolValid(x, valid_count), &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Invalid {
                op: "concat_cols",
                msg: "no inputs".into(),
            });
        }
        let r = need_matrix("concat_cols", self.val(parts[0]))?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (pr, pc) = need_matrix("concat_cols", self.val(*p))?;
            if pr != r {
                return Err(mismatch("concat_cols", &[r, pc], &[pr, pc]));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (p, w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.val(*p).data()[i * w..(i + 1) * w]);
            }
        }
        let t = Tensor::new(vec![r, total], out)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Stacks matrices vertically, or concatenates vectors.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Invalid {
                op: "concat_rows",
                msg: "no inputs".into(),
            });
        }
        let first = self.val(parts[0]).shape().to_vec();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.val(*p);
            match (first.as_slice(), t.shape()) {
                ([_], [n]) => rows += n,
                ([_, c], [r, c2]) if c == c2 => rows += r,
                _ => return Err(mismatch("concat_rows", &first, t.shape())),
            }
            data.extend_from_slice(t.data());
        }
        let shape = if first.len() == 1 {
            vec![rows]
        } else {
            vec![rows, first[1]]
        };
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Row gather from a table, as used for embedding lookup.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, h) = need_matrix("gather_rows", self.val(table))?;
        let src = self.val(table).data();
        let mut out = Vec::with_capacity(ids.len() * h);
        for &id in ids {
            if id >= v {
                return Err(TensorError::OutOfRange {
                    op: "gather_rows",
                    index: id,
                    len: v,
                });
            }
            out.extend_from_slice(&src[id * h..(id + 1) * h]);
        }
        let t = Tensor::new(vec![ids.len(), h], out)?;
        Ok(self.push(t, Op::GatherRows(table, ids.to_vec()), &[table]))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = need_matrix("slice_cols", self.val(a))?;
        if start > end || end > c {
            return Err(TensorError::Invalid {
                op: "slice_cols",
                msg: format!("range {start}..{end} outside 0..{c}"),
            });
        }
        let src = self.val(a).data();
        let mut out = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + end]);
        }
        let t = Tensor::new(vec![r, end - start], out)?;
        Ok(self.push(t, Op::SliceCols(a, start), &[a]))
    }

    /// Column `j` of a matrix as a vector.
    pub fn column(&mut self, a: Var, j: usize) -> Result<Var> {
        let (r, c) = need_matrix("column", self.val(a))?;
        if j >= c {
            return Err(TensorError::OutOfRange {
                op: "column",
                index: j,
                len: c,
            });
        }
        let src = self.val(a).data();
        let out = (0..r).map(|i| src[i * c + j]).collect();
        Ok(self.push(Tensor::vector(out), Op::Column(a, j), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.val(a).reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    /// Repeats a length-`d` mask (`[d]` or `[d, 1]`) into a `d×h` matrix.
    pub fn repeat_column(&mut self, mask: Var, h: usize) -> Result<Var> {
        if h < 1 {
            return Err(TensorError::Invalid {
                op: "repeat_column",
                msg: "width must be at least 1".into(),
            });
        }
        let t = self.val(mask);
        let d = match t.shape() {
            [d] | [d, 1] => *d,
            s => {
                return Err(TensorError::Invalid {
                    op: "repeat_column",
                    msg: format!("expected a d×1 mask, got {s:?}"),
                })
            }
        };
        let mut out = Vec::with_capacity(d * h);
        for &m in t.data() {
            out.extend(std::iter::repeat_n(m, h));
        }
        let t = Tensor::new(vec![d, h], out)?;
        Ok(self.push(t, Op::RepeatColumn(mask), &[mask]))
    }

    /// Elementwise maximum across equally long vectors. Ties resolve to the
    /// lowest list index, which is where the gradient goes.
    pub fn max_reduce(&mut self, columns: &[Var]) -> Result<Var> {
        let first = columns.first().ok_or(TensorError::Invalid {
            op: "max_reduce",
            msg: "empty column list".into(),
        })?;
        let n = need_vector("max_reduce", self.val(*first))?;
        for c in columns {
            let m = need_vector("max_reduce", self.val(*c))?;
            if m != n {
                return Err(mismatch("max_reduce", &[n], &[m]));
            }
        }
        let mut out = self.val(*first).data().to_vec();
        let mut arg = vec![0usize; n];
        for (k, c) in columns.iter().enumerate().skip(1) {
            for (i, v) in self.val(*c).data().iter().enumerate() {
                if *v > out[i] {
                    out[i] = *v;
                    arg[i] = k;
                }
            }
        }
        Ok(self.push(Tensor::vector(out), Op::MaxReduce(columns.to_vec(), arg), columns))
    }

    /// Stable descending sort; returns the sorted vector and `perm` with
    /// `sorted[i] == v[perm[i]]`.
    pub fn sort_descending(&mut self, v: Var) -> Result<(Var, Vec<usize>)> {
        need_vector("sort_descending", self.val(v))?;
        let src = self.val(v).data();
        let mut perm: Vec<usize> = (0..src.len()).collect();
        perm.sort_by(|&i, &j| src[j].total_cmp(&src[i]));
        let out = perm.iter().map(|&i| src[i]).collect();
        let var = self.push(Tensor::vector(out), Op::Sort(v, perm.clone()), &[v]);
        Ok((var, perm))
    }

    /// Scalar element `i` of a vector.
    pub fn index(&mut self, v: Var, i: usize) -> Result<Var> {
        let n = need_vector("index", self.val(v))?;
        if i >= n {
            return Err(TensorError::OutOfRange {
                op: "index",
                index: i,
                len: n,
            });
        }
        let x = self.val(v).data()[i];
        Ok(self.push(Tensor::scalar(x), Op::Index(v, i), &[v]))
    }

    /// Batch normalization of an `n×f` matrix using statistics over the rows
    /// flagged in `valid`. Invalid rows produce zeros.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, valid: &[bool], eps: f64) -> Result<(Var, BatchStats)> {
        let (n, f) = need_matrix("batch_norm", self.val(x))?;
        if valid.len() != n {
            return Err(mismatch("batch_norm", &[n], &[valid.len()]));
        }
        for p in [gamma, beta] {
            let m = need_vector("batch_norm", self.val(p))?;
            if m != f {
                return Err(mismatch("batch_norm", &[f], &[m]));
            }
        }
        let count = valid.iter().filter(|v| **v).count();
        if count == 0 {
            return Err(TensorError::Invalid {
                op: "batch_norm",
                msg: "no valid rows".into(),
            });
        }
        let src = self.val(x).data();
        let mut mean = vec![0.0; f];
        for (row, _) in src.chunks(f).zip(valid).filter(|(_, v)| **v) {
            for (m, x) in mean.iter_mut().zip(row) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        let mut sq = vec![0.0; f];
        for (row, _) in src.chunks(f).zip(valid).filter(|(_, v)| **v) {
            for ((s, x), m) in sq.iter_mut().zip(row).zip(&mean) {
                *s += (x - m) * (x - m);
            }
        }
        let inv_std: Vec<f64> = sq.iter().map(|s| 1.0 / (s / count as f64 + eps).sqrt()).collect();
        let unbiased = sq
            .iter()
            .map(|s| if count > 1 { s / (count - 1) as f64 } else { 0.0 })
            .collect();
        let (g, b) = (self.val(gamma).data(), self.val(beta).data());
        let mut xhat = vec![0.0; n * f];
        let mut out = vec![0.0; n * f];
        for i in 0..n {
            if !valid[i] {
                continue;
            }
            for j in 0..f {
                let h = (src[i * f + j] - mean[j]) * inv_std[j];
                xhat[i * f + j] = h;
                out[i * f + j] = g[j] * h + b[j];
            }
        }
        let t = Tensor::new(vec![n, f], out)?;
        let stats = BatchStats { mean, var: unbiased };
        let op = Op::BatchNorm {
            input: x,
            gamma,
            beta,
            valid: valid.to_vec(),
            xhat,
            inv_std,
        };
        Ok((self.push(t, op, &[x, gamma, beta]), stats))
    }

    /// Reverse sweep from a scalar root. Populates gradients for every value
    /// that requires them; constants and their descendants get none.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rv = &self.nodes[root.0].value;
        if rv.len() != 1 {
            return Err(TensorError::NotScalar {
                op: "backward",
                shape: rv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(vec![1.0]);
        }
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(idx, &node.op, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: impl FnOnce(&mut [f64])) {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]);
        contrib(slot);
    }

    fn propagate(&self, idx: usize, op: &Op, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let out = &self.nodes[idx].value;
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |s| axpy(s, g, 1.0));
                self.accumulate(grads, *b, |s| axpy(s, g, 1.0));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |s| axpy(s, g, 1.0));
                self.accumulate(grads, *b, |s| axpy(s, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.val(*a).data(), self.val(*b).data());
                self.accumulate(grads, *a, |s| {
                    for ((s, g), y) in s.iter_mut().zip(g).zip(vb) {
                        *s += g * y;
                    }
                });
                self.accumulate(grads, *b, |s| {
                    for ((s, g), x) in s.iter_mut().zip(g).zip(va) {
                        *s += g * x;
                    }
                });
            }
            Op::AddRow(a, b) => {
                let c = out.cols();
                self.accumulate(grads, *a, |s| axpy(s, g, 1.0));
                self.accumulate(grads, *b, |s| {
                    for row in g.chunks(c) {
                        axpy(s, row, 1.0);
                    }
                });
            }
            Op::MulRow(a, b) => {
                let c = out.cols();
                let (va, vb) = (self.val(*a).data(), self.val(*b).data());
                self.accumulate(grads, *a, |s| {
                    for (srow, grow) in s.chunks_mut(c).zip(g.chunks(c)) {
                        for ((s, g), y) in srow.iter_mut().zip(grow).zip(vb) {
                            *s += g * y;
                        }
                    }
                });
                self.accumulate(grads, *b, |s| {
                    for (arow, grow) in va.chunks(c).zip(g.chunks(c)) {
                        for ((s, g), x) in s.iter_mut().zip(grow).zip(arow) {
                            *s += g * x;
                        }
                    }
                });
            }
            Op::ScaleRows(a, k) => {
                let c = out.cols().max(1);
                let (va, vk) = (self.val(*a).data(), self.val(*k).data());
                self.accumulate(grads, *a, |s| {
                    for ((srow, grow), k) in s.chunks_mut(c).zip(g.chunks(c)).zip(vk) {
                        for (s, g) in srow.iter_mut().zip(grow) {
                            *s += g * k;
                        }
                    }
                });
                self.accumulate(grads, *k, |s| {
                    for ((s, arow), grow) in s.iter_mut().zip(va.chunks(c)).zip(g.chunks(c)) {
                        *s += arow.iter().zip(grow).map(|(x, g)| x * g).sum::<f64>();
                    }
                });
            }
            Op::Scale(a, k) => self.accumulate(grads, *a, |s| axpy(s, g, *k)),
            Op::AddScalar(a) | Op::Reshape(a) => self.accumulate(grads, *a, |s| axpy(s, g, 1.0)),
            Op::MatMul(a, b) => {
                let (n, k) = self.val(*a).dims2();
                let m = out.cols();
                let (va, vb) = (self.val(*a).data(), self.val(*b).data());
                self.accumulate(grads, *a, |s| {
                    for i in 0..n {
                        let grow = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            let brow = &vb[p * m..(p + 1) * m];
                            s[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                self.accumulate(grads, *b, |s| {
                    for i in 0..n {
                        let grow = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            let x = va[i * k + p];
                            if x != 0.0 {
                                axpy(&mut s[p * m..(p + 1) * m], grow, x);
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (r, c) = self.val(*a).dims2();
                self.accumulate(grads, *a, |s| {
                    for i in 0..r {
                        for j in 0..c {
                            s[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => self.accumulate(grads, *a, |s| {
                for ((s, g), y) in s.iter_mut().zip(g).zip(out.data()) {
                    *s += g * y * (1.0 - y);
                }
            }),
            Op::Tanh(a) => self.accumulate(grads, *a, |s| {
                for ((s, g), y) in s.iter_mut().zip(g).zip(out.data()) {
                    *s += g * (1.0 - y * y);
                }
            }),
            Op::Relu(a) => self.accumulate(grads, *a, |s| {
                for ((s, g), x) in s.iter_mut().zip(g).zip(self.val(*a).data()) {
                    if *x > 0.0 {
                        *s += g;
                    }
                }
            }),
            Op::Exp(a) => self.accumulate(grads, *a, |s| {
                for ((s, g), y) in s.iter_mut().zip(g).zip(out.data()) {
                    *s += g * y;
                }
            }),
            Op::Log(a) => self.accumulate(grads, *a, |s| {
                for ((s, g), x) in s.iter_mut().zip(g).zip(self.val(*a).data()) {
                    if *x >= LOG_CLAMP {
                        *s += g / x;
                    }
                }
            }),
            Op::Abs(a) => self.accumulate(grads, *a, |s| {
                for ((s, g), x) in s.iter_mut().zip(g).zip(self.val(*a).data()) {
                    *s += g * x.signum() * if *x == 0.0 { 0.0 } else { 1.0 };
                }
            }),
            Op::SoftmaxRows(a) => {
                let c = out.cols().max(1);
                self.accumulate(grads, *a, |s| {
                    for ((srow, grow), yrow) in s.chunks_mut(c).zip(g.chunks(c)).zip(out.data().chunks(c)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                        for ((s, g), y) in srow.iter_mut().zip(grow).zip(yrow) {
                            *s += y * (g - dot);
                        }
                    }
                });
            }
            Op::Sum(a) => self.accumulate(grads, *a, |s| s.iter_mut().for_each(|s| *s += g[0])),
            Op::Mean(a) => {
                let n = self.val(*a).len() as f64;
                self.accumulate(grads, *a, |s| s.iter_mut().for_each(|s| *s += g[0] / n))
            }
            Op::MeanPoolValid(x, valid) => {
                let h = out.len().max(1);
                let inv = 1.0 / *valid as f64;
                self.accumulate(grads, *x, |s| {
                    for row in s.chunks_mut(h).take(*valid) {
                        axpy(row, g, inv);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let r = out.rows();
                let mut offset = 0;
                for p in parts {
                    let w = self.val(*p).cols();
                    self.accumulate(grads, *p, |s| {
                        for i in 0..r {
                            axpy(
                                &mut s[i * w..(i + 1) * w],
                                &g[i * total + offset..i * total + offset + w],
                                1.0,
                            );
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.val(*p).len();
                    self.accumulate(grads, *p, |s| axpy(s, &g[offset..offset + n], 1.0));
                    offset += n;
                }
            }
            Op::GatherRows(table, ids) => {
                let h = out.cols();
                self.accumulate(grads, *table, |s| {
                    for (k, &id) in ids.iter().enumerate() {
                        axpy(&mut s[id * h..(id + 1) * h], &g[k * h..(k + 1) * h], 1.0);
                    }
                });
            }
            Op::SliceCols(a, start) => {
                let c = self.val(*a).cols();
                let w = out.cols();
                let r = out.rows();
                self.accumulate(grads, *a, |s| {
                    for i in 0..r {
                        axpy(&mut s[i * c + start..i * c + start + w], &g[i * w..(i + 1) * w], 1.0);
                    }
                });
            }
            Op::Column(a, j) => {
                let c = self.val(*a).cols();
                self.accumulate(grads, *a, |s| {
                    for (i, gv) in g.iter().enumerate() {
                        s[i * c + j] += gv;
                    }
                });
            }
            Op::RepeatColumn(m) => {
                let h = out.cols().max(1);
                self.accumulate(grads, *m, |s| {
                    for (s, row) in s.iter_mut().zip(g.chunks(h)) {
                        *s += row.iter().sum::<f64>();
                    }
                });
            }
            Op::MaxReduce(cols, arg) => {
                for (k, c) in cols.iter().enumerate() {
                    self.accumulate(grads, *c, |s| {
                        for (i, a) in arg.iter().enumerate() {
                            if *a == k {
                                s[i] += g[i];
                            }
                        }
                    });
                }
            }
            Op::Sort(v, perm) => self.accumulate(grads, *v, |s| {
                for (i, &p) in perm.iter().enumerate() {
                    s[p] += g[i];
                }
            }),
            Op::Index(v, i) => self.accumulate(grads, *v, |s| s[*i] += g[0]),
            Op::BatchNorm {
                input,
                gamma,
                beta,
                valid,
                xhat,
                inv_std,
            } => {
                let f = out.cols();
                let count = valid.iter().filter(|v| **v).count() as f64;
                let gm = self.val(*gamma).data();
                let mut sum_dy = vec![0.0; f];
                let mut sum_dy_xhat = vec![0.0; f];
                for (i, ok) in valid.iter().enumerate() {
                    if !ok {
                        continue;
                    }
                    for j in 0..f {
                        sum_dy[j] += g[i * f + j];
                        sum_dy_xhat[j] += g[i * f + j] * xhat[i * f + j];
                    }
                }
                self.accumulate(grads, *gamma, |s| axpy(s, &sum_dy_xhat, 1.0));
                self.accumulate(grads, *beta, |s| axpy(s, &sum_dy, 1.0));
                self.accumulate(grads, *input, |s| {
                    for (i, ok) in valid.iter().enumerate() {
                        if !ok {
                            continue;
                        }
                        for j in 0..f {
                            let dxhat = g[i * f + j] * gm[j];
                            let term = count * dxhat - gm[j] * sum_dy[j] - xhat[i * f + j] * gm[j] * sum_dy_xhat[j];
                            s[i * f + j] += inv_std[j] * term / count;
                        }
                    }
                });
            }
        }
        Ok(())
    }
}

fn axpy(dst: &mut [f64], src: &[f64], k: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += k * s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn square_derivative() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        t.backward(y).unwrap();
        assert!(close(t.grad(x).unwrap().item().unwrap(), 6.0));
    }

    #[test]
    fn sigmoid_derivative_at_zero() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(0.0));
        let y = t.sigmoid(x);
        t.backward(y).unwrap();
        assert!(close(t.grad(x).unwrap().item().unwrap(), 0.25));
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(t.backward(x), Err(TensorError::NotScalar { .. })));
    }

    #[test]
    fn constants_receive_no_grad() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0]));
        let c = t.constant(Tensor::vector(vec![3.0, 4.0]));
        let p = t.mul(x, c).unwrap();
        let s = t.sum(p);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[3.0, 4.0]);
        assert!(t.grad(c).is_none());
    }

    #[test]
    fn sort_descending_small() {
        let mut t = Tape::new();
        let v = t.param(Tensor::vector(vec![0.2, 0.9, 0.5]));
        let (s, perm) = t.sort_descending(v).unwrap();
        assert_eq!(t.value(s).data(), &[0.9, 0.5, 0.2]);
        assert_eq!(perm, vec![1, 2, 0]);

        let sorted = t.value(v).data().to_vec();
        let mut t2 = Tape::new();
        let w = t2.constant(Tensor::vector(vec![0.9, 0.5, 0.2]));
        let (_, ident) = t2.sort_descending(w).unwrap();
        assert_eq!(ident, vec![0, 1, 2]);
        assert_eq!(sorted.len(), 3);
    }

    #[test]
    fn sort_empty_vector() {
        let mut t = Tape::new();
        let v = t.constant(Tensor::vector(vec![]));
        let (s, perm) = t.sort_descending(v).unwrap();
        assert!(t.value(s).is_empty());
        assert!(perm.is_empty());
    }

    #[test]
    fn sort_gradient_routes_through_permutation() {
        let mut t = Tape::new();
        let v = t.param(Tensor::vector(vec![0.2, 0.9, 0.5]));
        let (s, _) = t.sort_descending(v).unwrap();
        let a = t.index(s, 0).unwrap();
        let b = t.index(s, 1).unwrap();
        let top2 = t.add(a, b).unwrap();
        t.backward(top2).unwrap();
        assert_eq!(t.grad(v).unwrap().data(), &[0.0, 1.0, 1.0]);
    }

    #[test]
    fn max_reduce_values_and_ties() {
        let mut t = Tape::new();
        let a = t.param(Tensor::vector(vec![0.2, 0.9]));
        let b = t.param(Tensor::vector(vec![0.5, 0.1]));
        let m = t.max_reduce(&[a, b]).unwrap();
        assert_eq!(t.value(m).data(), &[0.5, 0.9]);

        let single = t.max_reduce(&[a]).unwrap();
        assert_eq!(t.value(single).data(), &[0.2, 0.9]);

        let mut t = Tape::new();
        let a = t.param(Tensor::vector(vec![0.5]));
        let b = t.param(Tensor::vector(vec![0.5]));
        let m = t.max_reduce(&[a, b]).unwrap();
        let s = t.sum(m);
        t.backward(s).unwrap();
        assert_eq!(t.grad(a).unwrap().data(), &[1.0]);
        assert_eq!(t.grad(b).unwrap().data(), &[0.0]);
    }

    #[test]
    fn max_reduce_errors() {
        let mut t = Tape::new();
        assert!(t.max_reduce(&[]).is_err());
        let a = t.constant(Tensor::vector(vec![1.0]));
        let b = t.constant(Tensor::vector(vec![1.0, 2.0]));
        assert!(t.max_reduce(&[a, b]).is_err());
    }

    #[test]
    fn repeat_column_shapes_and_grad() {
        let mut t = Tape::new();
        let m = t.param(Tensor::matrix(1, 1, vec![0.25]).unwrap());
        let r = t.repeat_column(m, 3).unwrap();
        assert_eq!(t.shape(r), &[1, 3]);
        assert_eq!(t.value(r).data(), &[0.25, 0.25, 0.25]);
        assert!(t.repeat_column(m, 0).is_err());

        let mut t = Tape::new();
        let m = t.param(Tensor::vector(vec![0.3, 0.7]));
        let same = t.repeat_column(m, 1).unwrap();
        assert_eq!(t.value(same).data(), &[0.3, 0.7]);
        let r = t.repeat_column(m, 4).unwrap();
        let s = t.sum(r);
        t.backward(s).unwrap();
        assert_eq!(t.grad(m).unwrap().data(), &[4.0, 4.0]);
    }

    #[test]
    fn mean_pool_valid_cases() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_rows(&[vec![2.0, 4.0], vec![4.0, 8.0]]).unwrap());
        let p = t.mean_pool_valid(x, 2).unwrap();
        assert_eq!(t.value(p).data(), &[3.0, 6.0]);
        let first = t.mean_pool_valid(x, 1).unwrap();
        assert_eq!(t.value(first).data(), &[2.0, 4.0]);
        assert!(t.mean_pool_valid(x, 0).is_err());
        assert!(t.mean_pool_valid(x, 3).is_err());

        let padded = t.constant(Tensor::from_rows(&[vec![2.0, 4.0], vec![4.0, 8.0], vec![1e6, -7e5]]).unwrap());
        let q = t.mean_pool_valid(padded, 2).unwrap();
        assert_eq!(t.value(q).data(), &[3.0, 6.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_rows(&[vec![1000.0, -3.0, 2.0], vec![0.0, 0.0, 0.0]]).unwrap());
        let s = t.softmax(x);
        for row in t.value(s).data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|p| *p >= 0.0));
        }
    }

    #[test]
    fn log_clamps_at_zero() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![0.0]));
        let l = t.log(x);
        let s = t.sum(l);
        assert!((t.value(s).item().unwrap() - LOG_CLAMP.ln()).abs() < 1e-9);
        t.backward(s).unwrap();
        assert!(t.grad(x).unwrap().data()[0].is_finite());
    }

    #[test]
    fn gather_rows_rejects_out_of_vocab() {
        let mut t = Tape::new();
        let table = t.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(
            t.gather_rows(table, &[3]),
            Err(TensorError::OutOfRange { .. })
        ));
    }
}
