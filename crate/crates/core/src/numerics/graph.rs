use std::borrow::Cow;
use std::collections::HashMap;

use rand::Rng;

use super::gru::{self, GruCache};
use super::kernels::{self, add_into, matmul, matmul_a_bt_acc, matmul_at_b_acc, sigmoid, softmax_lane};
use super::params::{Gradients, ParamId, ParamSet};
use super::{NumericsError, Tensor};

type Result<T> = std::result::Result<T, NumericsError>;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Train mode enables dropout; eval mode makes dropout the identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// The four weight tensors of one GRU direction.
#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub w_ih: Var,
    pub w_hh: Var,
    pub b_ih: Var,
    pub b_hh: Var,
}

#[derive(Debug)]
enum Op {
    None,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Reshape(Var),
    Softmax { x: Var, len: usize, inner: usize },
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Sum(Var),
    Mean(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    Dropout { x: Var, mask: Vec<f64> },
    WeightedSum { weights: Var, inputs: Vec<Var> },
    Gru { x: Var, w: GruVars, cache: Box<GruCache> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Mse { pred: Var, target: Vec<f64> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Source {
    Constant,
    Leaf,
    Param(ParamId),
    Computed,
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    source: Source,
    requires_grad: bool,
}

/// Reverse-mode differentiation graph.
///
/// Every kernel call appends a node. Nodes are appended in evaluation order,
/// so the node list is already a topological order and [`Graph::backward`]
/// replays it in reverse. Parameters are borrowed from a [`ParamSet`] rather
/// than copied.
pub struct Graph<'p> {
    params: Option<&'p ParamSet>,
    nodes: Vec<Node<'p>>,
    param_vars: HashMap<ParamId, Var>,
    grads: Vec<Option<Vec<f64>>>,
    mode: Mode,
    consumed: bool,
}

impl Graph<'static> {
    pub fn new(mode: Mode) -> Self {
        Graph {
            params: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            grads: Vec::new(),
            mode,
            consumed: false,
        }
    }
}

impl<'p> Graph<'p> {
    pub fn with_params(params: &'p ParamSet, mode: Mode) -> Self {
        Graph {
            params: Some(params),
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            grads: Vec::new(),
            mode,
            consumed: false,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_training(&self) -> bool {
        self.mode == Mode::Train
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_raw(Cow::Owned(t), Op::None, Source::Constant, false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push_raw(Cow::Owned(t), Op::None, Source::Leaf, requires_grad)
    }

    /// The node for parameter `id`, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let params = self.params.expect("graph was built without a parameter set");
        let v = self.push_raw(Cow::Borrowed(params.get(id)), Op::None, Source::Param(id), true);
        self.param_vars.insert(id, v);
        v
    }

    fn push_raw(&mut self, value: Cow<'p, Tensor>, op: Op, source: Source, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            source,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if rg { op } else { Op::None };
        self.push_raw(Cow::Owned(value), op, Source::Computed, rg)
    }

    fn check_finite(&self, kernel: &'static str, inputs: &[Var]) -> Result<()> {
        if cfg!(debug_assertions) && inputs.iter().any(|v| !self.value(*v).is_finite()) {
            return Err(NumericsError::NonFinite { kernel });
        }
        Ok(())
    }

    fn matrix_dims(&self, kernel: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(NumericsError::InvalidArgument {
                kernel,
                msg: format!("expected a matrix, got shape {s:?}"),
            }),
        }
    }

    fn same_shape(&self, kernel: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(NumericsError::ShapeMismatch {
                kernel,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(NumericsError::ShapeMismatch {
                kernel: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        self.check_finite("matmul", &[a, b])?;
        let out = matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims("transpose", a)?;
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a), &[a]))
    }

    fn zip_with(&mut self, kernel: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(kernel, a, b)?;
        self.check_finite(kernel, &[a, b])?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| f(*p, *q)).collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("add", a, b, |p, q| p + q)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("sub", a, b, |p, q| p - q)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("mul", a, b, |p, q| p * q)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.check_finite("scale", &[a])?;
        let x = self.value(a);
        let t = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * factor).collect())?;
        Ok(self.push(t, Op::Scale(a, factor), &[a]))
    }

    /// Adds a bias vector (length = last dimension of `x`) to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.value(bias).numel() != cols {
            return Err(NumericsError::ShapeMismatch {
                kernel: "add_bias",
                left: self.shape(x).to_vec(),
                right: self.shape(bias).to_vec(),
            });
        }
        self.check_finite("add_bias", &[x, bias])?;
        let b = self.value(bias).data();
        let xv = self.value(x);
        let data = xv
            .data()
            .chunks(cols)
            .flat_map(|row| row.iter().zip(b).map(|(p, q)| p + q))
            .collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(t, Op::AddBias(x, bias), &[x, bias]))
    }

    /// Concatenation of matrices along the last dimension.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| NumericsError::InvalidArgument {
            kernel: "concat_cols",
            msg: "no operands".into(),
        })?;
        let (rows, _) = self.matrix_dims("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix_dims("concat_cols", p)?;
            if r != rows {
                return Err(NumericsError::ShapeMismatch {
                    kernel: "concat_cols",
                    left: self.shape(first).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            widths.push(c);
        }
        self.check_finite("concat_cols", parts)?;
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let t = Tensor::new(vec![rows, total], out)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Concatenation of matrices along the first dimension.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| NumericsError::InvalidArgument {
            kernel: "concat_rows",
            msg: "no operands".into(),
        })?;
        let (_, cols) = self.matrix_dims("concat_rows", first)?;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.matrix_dims("concat_rows", p)?;
            if c != cols {
                return Err(NumericsError::ShapeMismatch {
                    kernel: "concat_rows",
                    left: self.shape(first).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            rows += r;
        }
        self.check_finite("concat_rows", parts)?;
        let mut out = Vec::with_capacity(rows * cols);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::new(vec![rows, cols], out)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims("slice_cols", a)?;
        if start >= end || end > c {
            return Err(NumericsError::InvalidArgument {
                kernel: "slice_cols",
                msg: format!("range {start}..{end} invalid for width {c}"),
            });
        }
        let x = self.value(a);
        let mut out = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            out.extend_from_slice(&x.row(i)[start..end]);
        }
        let t = Tensor::new(vec![r, end - start], out)?;
        Ok(self.push(t, Op::SliceCols(a, start), &[a]))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims("slice_rows", a)?;
        if start >= end || end > r {
            return Err(NumericsError::InvalidArgument {
                kernel: "slice_rows",
                msg: format!("range {start}..{end} invalid for {r} rows"),
            });
        }
        let out = self.value(a).data()[start * c..end * c].to_vec();
        let t = Tensor::new(vec![end - start, c], out)?;
        Ok(self.push(t, Op::SliceRows(a, start), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    /// Softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(NumericsError::InvalidArgument {
                kernel: "softmax",
                msg: format!("axis {axis} out of range for shape {shape:?}"),
            });
        }
        self.check_finite("softmax", &[x])?;
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        let mut lane = vec![0.0; len];
        let mut res = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                for k in 0..len {
                    lane[k] = src[o * len * inner + k * inner + i];
                }
                softmax_lane(&lane, None, &mut res);
                for k in 0..len {
                    out[o * len * inner + k * inner + i] = res[k];
                }
            }
        }
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Softmax { x, len, inner }, &[x]))
    }

    /// Softmax along the last axis where positions with `keep[j] == false`
    /// are excluded (treated as a logit of negative infinity).
    pub fn masked_softmax(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let len = *shape.last().expect("non-empty shape");
        if keep.len() != len {
            return Err(NumericsError::ShapeMismatch {
                kernel: "masked_softmax",
                left: shape,
                right: vec![keep.len()],
            });
        }
        if !keep.iter().any(|&k| k) {
            return Err(NumericsError::InvalidArgument {
                kernel: "masked_softmax",
                msg: "every position is masked".into(),
            });
        }
        self.check_finite("masked_softmax", &[x])?;
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for (lane, res) in src.chunks(len).zip(out.chunks_mut(len)) {
            softmax_lane(lane, Some(keep), res);
        }
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Softmax { x, len, inner: 1 }, &[x]))
    }

    fn map(&mut self, kernel: &'static str, a: Var, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        self.check_finite(kernel, &[a])?;
        let x = self.value(a);
        Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| f(*v)).collect())
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.map("relu", a, |v| v.max(0.0))?;
        Ok(self.push(t, Op::Relu(a), &[a]))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let t = self.map("tanh", a, f64::tanh)?;
        Ok(self.push(t, Op::Tanh(a), &[a]))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let t = self.map("sigmoid", a, sigmoid)?;
        Ok(self.push(t, Op::Sigmoid(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check_finite("sum", &[a])?;
        let t = Tensor::scalar(self.value(a).sum());
        Ok(self.push(t, Op::Sum(a), &[a]))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.check_finite("mean", &[a])?;
        let x = self.value(a);
        let t = Tensor::scalar(x.sum() / x.numel() as f64);
        Ok(self.push(t, Op::Mean(a), &[a]))
    }

    /// Layer normalization over the last dimension with learned gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let cols = self.value(x).cols();
        for p in [gamma, beta] {
            if self.value(p).numel() != cols {
                return Err(NumericsError::ShapeMismatch {
                    kernel: "layer_norm",
                    left: self.shape(x).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
        }
        self.check_finite("layer_norm", &[x, gamma, beta])?;
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let xv = self.value(x);
        let rows = xv.numel() / cols;
        let mut xhat = vec![0.0; xv.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..cols {
                let h = (row[j] - mean) * is;
                xhat[r * cols + j] = h;
                out[r * cols + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Gathers rows of `table` (`vocab x d`) for each id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.matrix_dims("embedding", table)?;
        if ids.is_empty() {
            return Err(NumericsError::InvalidArgument {
                kernel: "embedding",
                msg: "empty id sequence".into(),
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(NumericsError::InvalidArgument {
                kernel: "embedding",
                msg: format!("id {bad} out of range for table of {vocab} rows"),
            });
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(tv.row(i));
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Inverted dropout: in train mode each entry is zeroed with probability
    /// `rate` and survivors are divided by `1 - rate`; in eval mode it is the
    /// identity and returns `x` itself.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(NumericsError::InvalidArgument {
                kernel: "dropout",
                msg: format!("rate {rate} outside [0, 1)"),
            });
        }
        if self.mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        self.check_finite("dropout", &[x])?;
        let keep = 1.0 - rate;
        let xv = self.value(x);
        let mask: Vec<f64> = (0..xv.numel())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Dropout { x, mask }, &[x]))
    }

    /// `sum_i weights[i] * inputs[i]` for same-shaped inputs.
    pub fn weighted_sum(&mut self, weights: Var, inputs: &[Var]) -> Result<Var> {
        if self.value(weights).numel() != inputs.len() || inputs.is_empty() {
            return Err(NumericsError::ShapeMismatch {
                kernel: "weighted_sum",
                left: self.shape(weights).to_vec(),
                right: vec![inputs.len()],
            });
        }
        for &v in &inputs[1..] {
            self.same_shape("weighted_sum", inputs[0], v)?;
        }
        self.check_finite("weighted_sum", inputs)?;
        self.check_finite("weighted_sum", &[weights])?;
        let w = self.value(weights).data();
        let mut out = vec![0.0; self.value(inputs[0]).numel()];
        for (wi, &v) in w.iter().zip(inputs) {
            for (o, x) in out.iter_mut().zip(self.value(v).data()) {
                *o += wi * x;
            }
        }
        let t = Tensor::new(self.shape(inputs[0]).to_vec(), out)?;
        let mut deps = inputs.to_vec();
        deps.push(weights);
        Ok(self.push(
            t,
            Op::WeightedSum {
                weights,
                inputs: inputs.to_vec(),
            },
            &deps,
        ))
    }

    /// One GRU direction over every row of `x` (`steps x input`), returning
    /// the `steps x hidden` state sequence.
    pub fn gru_scan(&mut self, x: Var, w: GruVars, reverse: bool) -> Result<Var> {
        let (steps, input) = self.matrix_dims("gru_scan", x)?;
        let (wi_r, wi_c) = self.matrix_dims("gru_scan", w.w_ih)?;
        let (wh_r, wh_c) = self.matrix_dims("gru_scan", w.w_hh)?;
        let hidden = wh_r;
        if wi_r != input || wi_c != 3 * hidden || wh_c != 3 * hidden {
            return Err(NumericsError::ShapeMismatch {
                kernel: "gru_scan",
                left: vec![steps, input],
                right: vec![wi_r, wi_c],
            });
        }
        if self.value(w.b_ih).numel() != 3 * hidden || self.value(w.b_hh).numel() != 3 * hidden {
            return Err(NumericsError::ShapeMismatch {
                kernel: "gru_scan",
                left: vec![3 * hidden],
                right: self.shape(w.b_ih).to_vec(),
            });
        }
        self.check_finite("gru_scan", &[x, w.w_ih, w.w_hh, w.b_ih, w.b_hh])?;
        let (out, cache) = gru::forward(
            self.value(x).data(),
            steps,
            input,
            hidden,
            self.value(w.w_ih).data(),
            self.value(w.w_hh).data(),
            self.value(w.b_ih).data(),
            self.value(w.b_hh).data(),
            reverse,
        );
        let t = Tensor::new(vec![steps, hidden], out)?;
        Ok(self.push(
            t,
            Op::Gru {
                x,
                w,
                cache: Box::new(cache),
            },
            &[x, w.w_ih, w.w_hh, w.b_ih, w.b_hh],
        ))
    }

    /// Mean softmax cross-entropy of `logits` (`[m]` or `[N, m]`) against class labels,
    /// evaluated through log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        let m = x.cols();
        let n = x.numel() / m;
        if labels.len() != n {
            return Err(NumericsError::ShapeMismatch {
                kernel: "cross_entropy",
                left: x.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= m) {
            return Err(NumericsError::InvalidArgument {
                kernel: "cross_entropy",
                msg: format!("label {bad} out of range for {m} classes"),
            });
        }
        self.check_finite("cross_entropy", &[logits])?;
        let x = self.value(logits);
        let mut probs = vec![0.0; x.numel()];
        let mut total = 0.0;
        for (i, (row, p)) in x.data().chunks(m).zip(probs.chunks_mut(m)).enumerate() {
            total += kernels::log_sum_exp(row) - row[labels[i]];
            softmax_lane(row, None, p);
        }
        let t = Tensor::scalar(total / n as f64);
        Ok(self.push(
            t,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Mean squared error between `pred` (any shape with N entries) and `target`.
    pub fn mse(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let n = self.value(pred).numel();
        if target.len() != n {
            return Err(NumericsError::ShapeMismatch {
                kernel: "mse",
                left: self.shape(pred).to_vec(),
                right: vec![target.len()],
            });
        }
        self.check_finite("mse", &[pred])?;
        let loss = self
            .value(pred)
            .data()
            .iter()
            .zip(target)
            .map(|(q, y)| (q - y) * (q - y))
            .sum::<f64>()
            / n as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Mse {
                pred,
                target: target.to_vec(),
            },
            &[pred],
        ))
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Afterwards every leaf and parameter with `requires_grad` holds
    /// `dLoss/dLeaf` (zero when unreachable) and the operation record is
    /// cleared, so a second call fails until a new graph is built.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(NumericsError::RecordConsumed);
        }
        if !self.value(loss).is_scalar() {
            return Err(NumericsError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let Graph { nodes, grads, .. } = self;
        grads.clear();
        grads.resize(nodes.len(), None);
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let op = std::mem::replace(&mut nodes[i].op, Op::None);
            if matches!(op, Op::None) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop(nodes, grads, op, &g, i);
        }
        for (node, grad) in nodes.iter_mut().zip(grads.iter_mut()) {
            match node.source {
                Source::Leaf | Source::Param(_) if node.requires_grad => {
                    if grad.is_none() {
                        *grad = Some(vec![0.0; node.value.numel()]);
                    }
                }
                _ => *grad = None,
            }
            node.op = Op::None;
        }
        Ok(())
    }

    /// Gradient of a leaf or parameter after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v).to_vec(), g.clone()).expect("gradient shape"))
    }

    /// Gradients of every parameter touched by this graph.
    pub fn param_grads(&self) -> Gradients {
        let params = self.params.expect("graph was built without a parameter set");
        let mut out = Gradients::zeros_like(params);
        for (&id, &v) in &self.param_vars {
            if let Some(g) = self.grad(v) {
                out.set(id, g);
            }
        }
        out
    }
}

fn acc(nodes: &[Node<'_>], grads: &mut [Option<Vec<f64>>], v: Var, contribution: &[f64]) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(g) => add_into(g, contribution),
        slot @ None => *slot = Some(contribution.to_vec()),
    }
}

/// Mutable gradient buffer for `v`, zero-filled on first touch.
fn slot<'a>(nodes: &[Node<'_>], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn backprop(nodes: &[Node<'_>], grads: &mut [Option<Vec<f64>>], op: Op, g: &[f64], at: usize) {
    let val = |v: Var| -> &Tensor { &nodes[v.0].value };
    let out = &nodes[at].value;
    match op {
        Op::None => {}
        Op::MatMul(a, b) => {
            let (m, k) = (val(a).rows(), val(a).cols());
            let n = val(b).cols();
            if let Some(ga) = slot(nodes, grads, a) {
                matmul_a_bt_acc(g, val(b).data(), m, n, k, ga);
            }
            if let Some(gb) = slot(nodes, grads, b) {
                matmul_at_b_acc(val(a).data(), g, m, k, n, gb);
            }
        }
        Op::Transpose(a) => {
            let (r, c) = (val(a).rows(), val(a).cols());
            let mut d = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    d[i * c + j] = g[j * r + i];
                }
            }
            acc(nodes, grads, a, &d);
        }
        Op::Add(a, b) => {
            acc(nodes, grads, a, g);
            acc(nodes, grads, b, g);
        }
        Op::Sub(a, b) => {
            acc(nodes, grads, a, g);
            let neg: Vec<f64> = g.iter().map(|v| -v).collect();
            acc(nodes, grads, b, &neg);
        }
        Op::Mul(a, b) => {
            let da: Vec<f64> = g.iter().zip(val(b).data()).map(|(x, y)| x * y).collect();
            let db: Vec<f64> = g.iter().zip(val(a).data()).map(|(x, y)| x * y).collect();
            acc(nodes, grads, a, &da);
            acc(nodes, grads, b, &db);
        }
        Op::Scale(a, f) => {
            let d: Vec<f64> = g.iter().map(|v| v * f).collect();
            acc(nodes, grads, a, &d);
        }
        Op::AddBias(x, b) => {
            acc(nodes, grads, x, g);
            let cols = val(b).numel();
            let mut db = vec![0.0; cols];
            for row in g.chunks(cols) {
                add_into(&mut db, row);
            }
            acc(nodes, grads, b, &db);
        }
        Op::ConcatCols(parts) => {
            let total = out.cols();
            let rows = out.rows();
            let mut offset = 0;
            for p in parts {
                let c = val(p).cols();
                if let Some(gp) = slot(nodes, grads, p) {
                    for i in 0..rows {
                        add_into(&mut gp[i * c..(i + 1) * c], &g[i * total + offset..i * total + offset + c]);
                    }
                }
                offset += c;
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for p in parts {
                let n = val(p).numel();
                acc(nodes, grads, p, &g[offset..offset + n]);
                offset += n;
            }
        }
        Op::SliceCols(a, start) => {
            let c = val(a).cols();
            let w = out.cols();
            if let Some(ga) = slot(nodes, grads, a) {
                for (i, grow) in g.chunks(w).enumerate() {
                    add_into(&mut ga[i * c + start..i * c + start + w], grow);
                }
            }
        }
        Op::SliceRows(a, start) => {
            let c = val(a).cols();
            if let Some(ga) = slot(nodes, grads, a) {
                add_into(&mut ga[start * c..start * c + g.len()], g);
            }
        }
        Op::Reshape(a) => acc(nodes, grads, a, g),
        Op::Softmax { x, len, inner } => {
            let y = out.data();
            let mut d = vec![0.0; y.len()];
            let outer = y.len() / (len * inner);
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |k: usize| o * len * inner + k * inner + i;
                    let dot: f64 = (0..len).map(|k| g[idx(k)] * y[idx(k)]).sum();
                    for k in 0..len {
                        d[idx(k)] = y[idx(k)] * (g[idx(k)] - dot);
                    }
                }
            }
            acc(nodes, grads, x, &d);
        }
        Op::Relu(a) => {
            let d: Vec<f64> = g
                .iter()
                .zip(val(a).data())
                .map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 })
                .collect();
            acc(nodes, grads, a, &d);
        }
        Op::Tanh(a) => {
            let d: Vec<f64> = g.iter().zip(out.data()).map(|(gv, y)| gv * (1.0 - y * y)).collect();
            acc(nodes, grads, a, &d);
        }
        Op::Sigmoid(a) => {
            let d: Vec<f64> = g.iter().zip(out.data()).map(|(gv, y)| gv * y * (1.0 - y)).collect();
            acc(nodes, grads, a, &d);
        }
        Op::Sum(a) => {
            let d = vec![g[0]; val(a).numel()];
            acc(nodes, grads, a, &d);
        }
        Op::Mean(a) => {
            let n = val(a).numel();
            let d = vec![g[0] / n as f64; n];
            acc(nodes, grads, a, &d);
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let cols = val(gamma).numel();
            let gm = val(gamma).data();
            let mut dgamma = vec![0.0; cols];
            let mut dbeta = vec![0.0; cols];
            let mut dx = vec![0.0; g.len()];
            for (r, is) in inv_std.iter().enumerate() {
                let gr = &g[r * cols..(r + 1) * cols];
                let hr = &xhat[r * cols..(r + 1) * cols];
                let mut mean_d = 0.0;
                let mut mean_dh = 0.0;
                for j in 0..cols {
                    dgamma[j] += gr[j] * hr[j];
                    dbeta[j] += gr[j];
                    let dxh = gr[j] * gm[j];
                    mean_d += dxh;
                    mean_dh += dxh * hr[j];
                }
                mean_d /= cols as f64;
                mean_dh /= cols as f64;
                for j in 0..cols {
                    let dxh = gr[j] * gm[j];
                    dx[r * cols + j] = is * (dxh - mean_d - hr[j] * mean_dh);
                }
            }
            acc(nodes, grads, x, &dx);
            acc(nodes, grads, gamma, &dgamma);
            acc(nodes, grads, beta, &dbeta);
        }
        Op::Embedding { table, ids } => {
            let d = val(table).cols();
            if let Some(gt) = slot(nodes, grads, table) {
                for (row, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * d..(id + 1) * d], &g[row * d..(row + 1) * d]);
                }
            }
        }
        Op::Dropout { x, mask } => {
            let d: Vec<f64> = g.iter().zip(&mask).map(|(a, b)| a * b).collect();
            acc(nodes, grads, x, &d);
        }
        Op::WeightedSum { weights, inputs } => {
            let w = val(weights).data().to_vec();
            let dw: Vec<f64> = inputs
                .iter()
                .map(|&v| g.iter().zip(val(v).data()).map(|(a, b)| a * b).sum())
                .collect();
            for (&v, wi) in inputs.iter().zip(&w) {
                if let Some(gv) = slot(nodes, grads, v) {
                    for (o, gg) in gv.iter_mut().zip(g) {
                        *o += wi * gg;
                    }
                }
            }
            acc(nodes, grads, weights, &dw);
        }
        Op::Gru { x, w, cache } => {
            let input = val(x).cols();
            let gg = gru::backward(
                &cache,
                val(x).data(),
                input,
                val(w.w_ih).data(),
                val(w.w_hh).data(),
                g,
            );
            acc(nodes, grads, x, &gg.x);
            acc(nodes, grads, w.w_ih, &gg.w_ih);
            acc(nodes, grads, w.w_hh, &gg.w_hh);
            acc(nodes, grads, w.b_ih, &gg.b_ih);
            acc(nodes, grads, w.b_hh, &gg.b_hh);
        }
        Op::CrossEntropy { logits, labels, probs } => {
            let m = val(logits).cols();
            let n = labels.len() as f64;
            let mut d = probs;
            for (i, &y) in labels.iter().enumerate() {
                d[i * m + y] -= 1.0;
            }
            for v in &mut d {
                *v *= g[0] / n;
            }
            acc(nodes, grads, logits, &d);
        }
        Op::Mse { pred, target } => {
            let n = target.len() as f64;
            let d: Vec<f64> = val(pred)
                .data()
                .iter()
                .zip(&target)
                .map(|(q, y)| 2.0 * (q - y) / n * g[0])
                .collect();
            acc(nodes, grads, pred, &d);
        }
    }
}
