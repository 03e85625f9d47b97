use super::Tensor;
use crate::error::TensorError;
use serde::{Deserialize, Serialize};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Act(Var, Activation),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Conv1d {
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    PadRows {
        input: Var,
        before: usize,
    },
    SliceRows {
        input: Var,
        start: usize,
    },
    RowScale {
        input: Var,
        scores: Var,
    },
    WeightedMean {
        input: Var,
        scores: Var,
    },
    GatherRows {
        table: Var,
        indices: Vec<usize>,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Bce {
        pred: Var,
        targets: Vec<f64>,
    },
    Mask {
        input: Var,
        mask: Vec<f64>,
    },
    Clamp {
        input: Var,
        lo: f64,
        hi: f64,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: Option<(Vec<f64>, Vec<f64>)>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Clipping bound applied to predictions inside [`Graph::bce`].
pub const BCE_EPSILON: f64 = 1e-7;

/// Append-only tape of tensor operations.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn mat_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize), TensorError> {
        let t = &self.nodes[v.0].value;
        match t.shape() {
            [r, c] => Ok((*r, *c)),
            s => Err(TensorError::Rank {
                op,
                shape: s.to_vec(),
            }),
        }
    }

    /// Gradient accumulated by the last [`Graph::backward`] call. Nodes the
    /// loss does not depend on report zeros.
    pub fn grad(&self, v: Var) -> Tensor {
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shape(v)),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.mat_dims("matmul", a)?;
        let (k2, n) = self.mat_dims("matmul", b)?;
        if k != k2 {
            return Err(TensorError::dim("matmul", "inner", k, k2));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &y) in orow.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul(a, b)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() {
            return Err(TensorError::dim(op, "rank", sa.len(), sb.len()));
        }
        for (&x, &y) in sa.iter().zip(sb) {
            if x != y {
                return Err(TensorError::dim(op, "elementwise", x, y));
            }
        }
        Ok(())
    }

    fn zip_with(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, TensorError> {
        self.same_shape(op_name, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_with("hadamard", a, b, |x, y| x * y, Op::Hadamard(a, b))
    }

    /// Adds a bias vector of length `cols` to every row of a matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (r, c) = self.mat_dims("add_row", x)?;
        let bl = self.value(bias).len();
        if bl != c {
            return Err(TensorError::dim("add_row", "column", c, bl));
        }
        let b = self.value(bias).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(c) {
            for (v, bb) in row.iter_mut().zip(&b) {
                *v += bb;
            }
        }
        let t = Tensor::new(vec![r, c], data)?;
        Ok(self.push(t, Op::AddRow(x, bias)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = self.value(x).map(|v| v * factor);
        self.push(t, Op::Scale(x, factor))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let t = self.value(x).map(|v| kind.apply(v));
        self.push(t, Op::Act(x, kind))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    /// Concatenates tensors of equal rank along `axis`.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = *inputs.first().ok_or(TensorError::Argument {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::dim("concat", "axis", base.len() - 1, axis));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len() {
                return Err(TensorError::dim("concat", "rank", base.len(), s.len()));
            }
            for (d, (&x, &y)) in s.iter().zip(&base).enumerate() {
                if d != axis && x != y {
                    return Err(TensorError::dim("concat", "non-concat", y, x));
                }
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let block = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::new(shape, data)?;
        Ok(self.push(
            t,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// Valid (unpadded) 1-D convolution of a `[len × channels]` input with
    /// `[k × channels × filters]` kernels.
    pub fn conv1d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
    ) -> Result<Var, TensorError> {
        if stride == 0 {
            return Err(TensorError::Argument {
                op: "conv1d",
                msg: "stride must be positive".into(),
            });
        }
        let (len, ch) = self.mat_dims("conv1d", input)?;
        let (k, kc, f) = match self.shape(kernel) {
            [k, c, f] => (*k, *c, *f),
            s => {
                return Err(TensorError::Rank {
                    op: "conv1d",
                    shape: s.to_vec(),
                })
            }
        };
        if kc != ch {
            return Err(TensorError::dim("conv1d", "channel", ch, kc));
        }
        if k > len {
            return Err(TensorError::dim("conv1d", "length", k, len));
        }
        if self.value(bias).len() != f {
            return Err(TensorError::dim(
                "conv1d",
                "filter",
                f,
                self.value(bias).len(),
            ));
        }
        let out_len = (len - k) / stride + 1;
        let x = self.value(input).data();
        let w = self.value(kernel).data();
        let b = self.value(bias).data();
        let mut out = Vec::with_capacity(out_len * f);
        for t in 0..out_len {
            out.extend_from_slice(b);
            let orow = &mut out[t * f..(t + 1) * f];
            for j in 0..k {
                let xrow = &x[(t * stride + j) * ch..(t * stride + j + 1) * ch];
                for (c, &xv) in xrow.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    let wrow = &w[(j * ch + c) * f..(j * ch + c + 1) * f];
                    for (o, &wv) in orow.iter_mut().zip(wrow) {
                        *o += xv * wv;
                    }
                }
            }
        }
        let t = Tensor::new(vec![out_len, f], out)?;
        Ok(self.push(
            t,
            Op::Conv1d {
                input,
                kernel,
                bias,
                stride,
            },
        ))
    }

    /// Max pooling along the first axis. Rank-1 inputs are a single channel.
    /// Ties resolve to the lowest index.
    pub fn maxpool1d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var, TensorError> {
        if window == 0 || stride == 0 {
            return Err(TensorError::Argument {
                op: "maxpool1d",
                msg: "window and stride must be positive".into(),
            });
        }
        let shape = self.shape(input).to_vec();
        let (len, ch) = match shape.as_slice() {
            [n] => (*n, 1),
            [r, c] => (*r, *c),
            s => {
                return Err(TensorError::Rank {
                    op: "maxpool1d",
                    shape: s.to_vec(),
                })
            }
        };
        if window > len {
            return Err(TensorError::dim("maxpool1d", "length", window, len));
        }
        let out_len = (len - window) / stride + 1;
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(out_len * ch);
        let mut argmax = Vec::with_capacity(out_len * ch);
        for t in 0..out_len {
            for c in 0..ch {
                let mut best = (t * stride) * ch + c;
                for j in 1..window {
                    let idx = (t * stride + j) * ch + c;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
        let out_shape = if shape.len() == 1 {
            vec![out_len]
        } else {
            vec![out_len, ch]
        };
        let t = Tensor::new(out_shape, out)?;
        Ok(self.push(t, Op::MaxPool { input, argmax }))
    }

    pub fn pad_rows(&mut self, input: Var, before: usize, after: usize) -> Result<Var, TensorError> {
        let (r, c) = self.mat_dims("pad_rows", input)?;
        let mut data = vec![0.0; before * c];
        data.extend_from_slice(self.value(input).data());
        data.resize((before + r + after) * c, 0.0);
        let t = Tensor::new(vec![before + r + after, c], data)?;
        Ok(self.push(t, Op::PadRows { input, before }))
    }

    pub fn slice_rows(&mut self, input: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (r, c) = self.mat_dims("slice_rows", input)?;
        if len == 0 || start + len > r {
            return Err(TensorError::dim("slice_rows", "row", r, start + len));
        }
        let data = self.value(input).data()[start * c..(start + len) * c].to_vec();
        let t = Tensor::new(vec![len, c], data)?;
        Ok(self.push(t, Op::SliceRows { input, start }))
    }

    /// Multiplies row `i` of `input` by `scores[i]`.
    pub fn row_scale(&mut self, input: Var, scores: Var) -> Result<Var, TensorError> {
        let (r, c) = self.mat_dims("row_scale", input)?;
        let sl = self.value(scores).len();
        if sl != r {
            return Err(TensorError::dim("row_scale", "row", r, sl));
        }
        let s = self.value(scores).data();
        let mut data = self.value(input).data().to_vec();
        for (row, &sv) in data.chunks_mut(c).zip(s) {
            for v in row {
                *v *= sv;
            }
        }
        let t = Tensor::new(vec![r, c], data)?;
        Ok(self.push(t, Op::RowScale { input, scores }))
    }

    /// Score-weighted mean of the rows of `input`, returned as a `[1 × cols]` row.
    pub fn weighted_mean_rows(&mut self, input: Var, scores: Var) -> Result<Var, TensorError> {
        let (r, c) = self.mat_dims("weighted_mean_rows", input)?;
        let sl = self.value(scores).len();
        if sl != r {
            return Err(TensorError::dim("weighted_mean_rows", "row", r, sl));
        }
        let s = self.value(scores).data();
        let total: f64 = s.iter().sum();
        if total == 0.0 {
            return Err(TensorError::Argument {
                op: "weighted_mean_rows",
                msg: "scores sum to zero".into(),
            });
        }
        let x = self.value(input).data();
        let mut out = vec![0.0; c];
        for (row, &sv) in x.chunks(c).zip(s) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += sv * v;
            }
        }
        for o in &mut out {
            *o /= total;
        }
        let t = Tensor::new(vec![1, c], out)?;
        Ok(self.push(t, Op::WeightedMean { input, scores }))
    }

    /// Row lookup: equivalent to multiplying one-hot rows by `table`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var, TensorError> {
        let (v, d) = self.mat_dims("gather_rows", table)?;
        if indices.is_empty() {
            return Err(TensorError::Argument {
                op: "gather_rows",
                msg: "no indices".into(),
            });
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= v {
                return Err(TensorError::dim("gather_rows", "row", v, i));
            }
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(vec![indices.len(), d], data)?;
        Ok(self.push(
            t,
            Op::GatherRows {
                table,
                indices: indices.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(input).reshaped(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape(input)))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(input))
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let t = self.value(input);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(input))
    }

    /// Mean binary cross-entropy between `pred` (clipped to
    /// `[BCE_EPSILON, 1 - BCE_EPSILON]`) and 0/1 targets.
    pub fn bce(&mut self, pred: Var, targets: &[f64]) -> Result<Var, TensorError> {
        let p = self.value(pred).data();
        if p.len() != targets.len() {
            return Err(TensorError::dim("bce", "batch", p.len(), targets.len()));
        }
        let mut loss = 0.0;
        for (&pv, &t) in p.iter().zip(targets) {
            let pc = pv.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
            loss -= t * pc.ln() + (1.0 - t) * (1.0 - pc).ln();
        }
        loss /= p.len() as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                pred,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Elementwise product with a constant mask (dropout and friends).
    pub fn mask(&mut self, input: Var, mask: Vec<f64>) -> Result<Var, TensorError> {
        let x = self.value(input);
        if x.len() != mask.len() {
            return Err(TensorError::dim("mask", "elementwise", x.len(), mask.len()));
        }
        let data = x.data().iter().zip(&mask).map(|(a, b)| a * b).collect();
        let t = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Mask { input, mask }))
    }

    pub fn clamp(&mut self, input: Var, lo: f64, hi: f64) -> Var {
        let t = self.value(input).map(|v| v.clamp(lo, hi));
        self.push(t, Op::Clamp { input, lo, hi })
    }

    /// Per-column normalisation of a `[batch × features]` matrix followed by
    /// a learned scale and shift. With `running = None` the batch statistics
    /// are used (training); otherwise the supplied `(mean, var)` are treated
    /// as constants (inference).
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<Var, TensorError> {
        let (b, f) = self.mat_dims("batch_norm", input)?;
        for v in [gamma, beta] {
            if self.value(v).len() != f {
                return Err(TensorError::dim("batch_norm", "feature", f, self.value(v).len()));
            }
        }
        let x = self.value(input).data();
        let (mean, var, batch_stats) = match running {
            Some((m, v)) => {
                if m.len() != f || v.len() != f {
                    return Err(TensorError::dim("batch_norm", "running", f, m.len()));
                }
                (m.to_vec(), v.to_vec(), None)
            }
            None => {
                let mut mean = vec![0.0; f];
                for row in x.chunks(f) {
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= b as f64);
                let mut var = vec![0.0; f];
                for row in x.chunks(f) {
                    for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= b as f64);
                (mean.clone(), var.clone(), Some((mean, var)))
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gm = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = Vec::with_capacity(b * f);
        let mut out = Vec::with_capacity(b * f);
        for row in x.chunks(f) {
            for j in 0..f {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat.push(h);
                out.push(gm[j] * h + bt[j]);
            }
        }
        let t = Tensor::new(vec![b, f], out)?;
        Ok(self.push(
            t,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
        ))
    }

    /// Batch `(mean, biased variance)` recorded by a training-mode batch norm node.
    pub fn batch_stats(&self, v: Var) -> Option<(&[f64], &[f64])> {
        match &self.nodes[v.0].op {
            Op::BatchNorm {
                batch_stats: Some((m, s)),
                ..
            } => Some((m, s)),
            _ => None,
        }
    }

    /// Reverse-mode sweep from a scalar `loss`. Afterwards [`Graph::grad`]
    /// returns d(loss)/d(node) for every node on the tape.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let shape = self.shape(loss).to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss { shape });
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        self.grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.map(|d| Tensor::new(node.value.shape().to_vec(), d).expect("grad shape"))
            })
            .collect();
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.nodes[a.0].value.dims2().unwrap();
                let n = self.nodes[b.0].value.shape()[1];
                let (av, bv) = (val(*a), val(*b));
                let ga = acc(grads, *a, m * k);
                for r in 0..m {
                    for p in 0..k {
                        let mut s = 0.0;
                        for c in 0..n {
                            s += g[r * n + c] * bv[p * n + c];
                        }
                        ga[r * k + p] += s;
                    }
                }
                let gb = acc(grads, *b, k * n);
                for r in 0..m {
                    for p in 0..k {
                        let x = av[r * k + p];
                        if x == 0.0 {
                            continue;
                        }
                        for c in 0..n {
                            gb[p * n + c] += x * g[r * n + c];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                add_into(acc(grads, *a, g.len()), g, 1.0);
                add_into(acc(grads, *b, g.len()), g, 1.0);
            }
            Op::Sub(a, b) => {
                add_into(acc(grads, *a, g.len()), g, 1.0);
                add_into(acc(grads, *b, g.len()), g, -1.0);
            }
            Op::Hadamard(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let ga = acc(grads, *a, g.len());
                for j in 0..g.len() {
                    ga[j] += g[j] * bv[j];
                }
                let gb = acc(grads, *b, g.len());
                for j in 0..g.len() {
                    gb[j] += g[j] * av[j];
                }
            }
            Op::AddRow(x, b) => {
                add_into(acc(grads, *x, g.len()), g, 1.0);
                let c = self.nodes[b.0].value.len();
                let gb = acc(grads, *b, c);
                for row in g.chunks(c) {
                    add_into(gb, row, 1.0);
                }
            }
            Op::Scale(x, f) => add_into(acc(grads, *x, g.len()), g, *f),
            Op::Act(x, kind) => {
                let y = node.value.data();
                let gx = acc(grads, *x, g.len());
                for j in 0..g.len() {
                    gx[j] += g[j] * kind.derivative_from_output(y[j]);
                }
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let row = shape[*axis] * inner;
                let mut offset = 0;
                for v in inputs {
                    let block = self.nodes[v.0].value.shape()[*axis] * inner;
                    let gv = acc(grads, *v, outer * block);
                    for o in 0..outer {
                        let src = &g[o * row + offset..o * row + offset + block];
                        add_into(&mut gv[o * block..(o + 1) * block], src, 1.0);
                    }
                    offset += block;
                }
            }
            Op::Conv1d {
                input,
                kernel,
                bias,
                stride,
            } => {
                let (len, ch) = self.nodes[input.0].value.dims2().unwrap();
                let ks = self.nodes[kernel.0].value.shape();
                let (k, f) = (ks[0], ks[2]);
                let out_len = node.value.shape()[0];
                let (x, w) = (val(*input), val(*kernel));
                let gx = acc(grads, *input, len * ch);
                for t in 0..out_len {
                    let grow = &g[t * f..(t + 1) * f];
                    for j in 0..k {
                        let base = (t * stride + j) * ch;
                        for c in 0..ch {
                            let wrow = &w[(j * ch + c) * f..(j * ch + c + 1) * f];
                            gx[base + c] += dot(grow, wrow);
                        }
                    }
                }
                let gw = acc(grads, *kernel, k * ch * f);
                for t in 0..out_len {
                    let grow = &g[t * f..(t + 1) * f];
                    for j in 0..k {
                        let base = (t * stride + j) * ch;
                        for c in 0..ch {
                            let xv = x[base + c];
                            if xv == 0.0 {
                                continue;
                            }
                            add_into(&mut gw[(j * ch + c) * f..(j * ch + c + 1) * f], grow, xv);
                        }
                    }
                }
                let gb = acc(grads, *bias, f);
                for grow in g.chunks(f) {
                    add_into(gb, grow, 1.0);
                }
            }
            Op::MaxPool { input, argmax } => {
                let n = self.nodes[input.0].value.len();
                let gx = acc(grads, *input, n);
                for (&idx, &gv) in argmax.iter().zip(g) {
                    gx[idx] += gv;
                }
            }
            Op::PadRows { input, before } => {
                let (r, c) = self.nodes[input.0].value.dims2().unwrap();
                let gx = acc(grads, *input, r * c);
                add_into(gx, &g[before * c..(before + r) * c], 1.0);
            }
            Op::SliceRows { input, start } => {
                let (r, c) = self.nodes[input.0].value.dims2().unwrap();
                let gx = acc(grads, *input, r * c);
                add_into(&mut gx[start * c..start * c + g.len()], g, 1.0);
            }
            Op::RowScale { input, scores } => {
                let (r, c) = self.nodes[input.0].value.dims2().unwrap();
                let (x, s) = (val(*input), val(*scores));
                let gx = acc(grads, *input, r * c);
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] += g[i * c + j] * s[i];
                    }
                }
                let gs = acc(grads, *scores, r);
                for i in 0..r {
                    gs[i] += dot(&g[i * c..(i + 1) * c], &x[i * c..(i + 1) * c]);
                }
            }
            Op::WeightedMean { input, scores } => {
                let (r, c) = self.nodes[input.0].value.dims2().unwrap();
                let (x, s) = (val(*input), val(*scores));
                let total: f64 = s.iter().sum();
                let out = node.value.data();
                let gx = acc(grads, *input, r * c);
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] += g[j] * s[i] / total;
                    }
                }
                let gs = acc(grads, *scores, r);
                for i in 0..r {
                    let mut d = 0.0;
                    for j in 0..c {
                        d += g[j] * (x[i * c + j] - out[j]);
                    }
                    gs[i] += d / total;
                }
            }
            Op::GatherRows { table, indices } => {
                let (v, d) = self.nodes[table.0].value.dims2().unwrap();
                let gt = acc(grads, *table, v * d);
                for (row, &idx) in g.chunks(d).zip(indices) {
                    add_into(&mut gt[idx * d..(idx + 1) * d], row, 1.0);
                }
            }
            Op::Reshape(x) => add_into(acc(grads, *x, g.len()), g, 1.0),
            Op::Sum(x) => {
                let n = self.nodes[x.0].value.len();
                acc(grads, *x, n).iter_mut().for_each(|v| *v += g[0]);
            }
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.len();
                let share = g[0] / n as f64;
                acc(grads, *x, n).iter_mut().for_each(|v| *v += share);
            }
            Op::Bce { pred, targets } => {
                let p = val(*pred);
                let n = p.len() as f64;
                let gp = acc(grads, *pred, p.len());
                for ((gv, &pv), &t) in gp.iter_mut().zip(p).zip(targets) {
                    if (BCE_EPSILON..=1.0 - BCE_EPSILON).contains(&pv) {
                        *gv += g[0] * (-t / pv + (1.0 - t) / (1.0 - pv)) / n;
                    }
                }
            }
            Op::Mask { input, mask } => {
                let gx = acc(grads, *input, g.len());
                for j in 0..g.len() {
                    gx[j] += g[j] * mask[j];
                }
            }
            Op::Clamp { input, lo, hi } => {
                let x = val(*input);
                let gx = acc(grads, *input, g.len());
                for j in 0..g.len() {
                    if x[j] >= *lo && x[j] <= *hi {
                        gx[j] += g[j];
                    }
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (b, f) = self.nodes[input.0].value.dims2().unwrap();
                let gm = val(*gamma);
                let gb = acc(grads, *beta, f);
                for row in g.chunks(f) {
                    add_into(gb, row, 1.0);
                }
                let gg = acc(grads, *gamma, f);
                for (grow, hrow) in g.chunks(f).zip(xhat.chunks(f)) {
                    for j in 0..f {
                        gg[j] += grow[j] * hrow[j];
                    }
                }
                let gx = acc(grads, *input, b * f);
                if batch_stats.is_some() {
                    let bn = b as f64;
                    for j in 0..f {
                        let mut sum_d = 0.0;
                        let mut sum_dh = 0.0;
                        for r in 0..b {
                            let d = g[r * f + j] * gm[j];
                            sum_d += d;
                            sum_dh += d * xhat[r * f + j];
                        }
                        for r in 0..b {
                            let d = g[r * f + j] * gm[j];
                            gx[r * f + j] +=
                                inv_std[j] / bn * (bn * d - sum_d - xhat[r * f + j] * sum_dh);
                        }
                    }
                } else {
                    for r in 0..b {
                        for j in 0..f {
                            gx[r * f + j] += g[r * f + j] * gm[j] * inv_std[j];
                        }
                    }
                }
            }
        }
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

fn add_into(dst: &mut [f64], src: &[f64], factor: f64) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += factor * s;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
