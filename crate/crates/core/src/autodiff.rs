//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! Every operation appends one node to the [`Tape`]; a node's inputs always
//! have smaller ids, so iterating ids in reverse is a valid topological
//! order for [`Tape::backward`]. Values are checked for finiteness after
//! every op.

use crate::linalg::gemm;
use crate::tensor::{axis_extents, numel, NumericError, Result, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel statistics of one batch-norm call in training mode.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, as used for running averages.
    pub var: Vec<f64>,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddTrailing(Var, Var),
    MulTrailing(Var, Var),
    Affine(Var, f64),
    MulScalar(Var, Var),
    MulConst(Var, Vec<f64>),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    TransposeLast2(Var),
    Reshape(Var),
    NarrowRows(Var),
    Conv1d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    MaxPool1d {
        x: Var,
        argmax: Vec<usize>,
    },
    MeanAxis {
        x: Var,
        axis: usize,
    },
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        axis: usize,
        inv_std: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    SplitHeads {
        x: Var,
        heads: usize,
    },
    MergeHeads {
        x: Var,
        heads: usize,
    },
    Sum(Var),
    Mean(Var),
    DotConst(Var, Vec<f64>),
    Huber {
        pred: Var,
        target: Vec<f64>,
        delta: f64,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | AddTrailing(a, b) | MulTrailing(a, b) => {
                vec![*a, *b]
            }
            MulScalar(a, b) | MatMul(a, b) | BatchMatMul(a, b) => vec![*a, *b],
            Affine(x, _) | MulConst(x, _) | TransposeLast2(x) | Reshape(x) | NarrowRows(x) => {
                vec![*x]
            }
            Relu(x) | Gelu(x) | Sigmoid(x) | Sum(x) | Mean(x) | DotConst(x, _) => vec![*x],
            Conv1d { x, w, bias, .. } => {
                let mut v = vec![*x, *w];
                v.extend(bias.iter().copied());
                v
            }
            MaxPool1d { x, .. }
            | MeanAxis { x, .. }
            | Softmax { x, .. }
            | LayerNorm { x, .. }
            | SplitHeads { x, .. }
            | MergeHeads { x, .. } => vec![*x],
            BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Huber { pred, .. } => vec![*pred],
            CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of one scalar with respect to every node that requires grad.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Recorded computation graph. Not meant for concurrent mutation; build one
/// tape per thread and merge parameter gradients afterwards.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, expected: &[usize], got: &[usize]) -> NumericError {
    NumericError::ShapeMismatch {
        op,
        expected: expected.to_vec(),
        got: got.to_vec(),
    }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> NumericError {
    NumericError::InvalidArgument {
        op,
        msg: msg.into(),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `tanh` through one `exp`; saturates to ±1 without overflow.
fn tanh(u: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

fn conv_out_len(t: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = t + 2 * padding;
    if stride == 0 || k == 0 || k > padded {
        None
    } else {
        Some((padded - k) / stride + 1)
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(NumericError::Cyclic {
                node: v.0,
                consumer: self.nodes.len(),
            })
        }
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(NumericError::NonFinite { op: name });
        }
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a leaf; it participates in backward iff `requires_grad`.
    pub fn input(&mut self, t: &Tensor, requires_grad: bool) -> Result<Var> {
        if !t.is_finite() {
            return Err(NumericError::NonFinite { op: "input" });
        }
        let value = Tensor::from_parts(t.shape().to_vec(), t.data().to_vec());
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a leaf using the tensor's own `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> Result<Var> {
        self.input(t, t.requires_grad())
    }

    pub fn constant(&mut self, t: &Tensor) -> Result<Var> {
        self.input(t, false)
    }

    fn same_shape(&self, name: &'static str, a: Var, b: Var) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(name, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, f: fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        self.push(name, value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn trailing(&self, name: &'static str, x: Var, b: Var) -> Result<usize> {
        self.check(x)?;
        self.check(b)?;
        let xs = self.shape(x);
        let bs = self.shape(b);
        if bs.len() > xs.len() || xs[xs.len() - bs.len()..] != *bs {
            return Err(mismatch(name, xs, bs));
        }
        Ok(numel(bs))
    }

    /// `x + b` where `b`'s shape equals the trailing dims of `x`.
    pub fn add_trailing(&mut self, x: Var, b: Var) -> Result<Var> {
        let nb = self.trailing("add_trailing", x, b)?;
        let bd = self.data(b);
        let data = self
            .data(x)
            .chunks(nb)
            .flat_map(|row| row.iter().zip(bd).map(|(v, c)| v + c))
            .collect();
        let value = Tensor::from_parts(self.shape(x).to_vec(), data);
        self.push("add_trailing", value, Op::AddTrailing(x, b))
    }

    /// `x * g` where `g`'s shape equals the trailing dims of `x`.
    pub fn mul_trailing(&mut self, x: Var, g: Var) -> Result<Var> {
        let ng = self.trailing("mul_trailing", x, g)?;
        let gd = self.data(g);
        let data = self
            .data(x)
            .chunks(ng)
            .flat_map(|row| row.iter().zip(gd).map(|(v, c)| v * c))
            .collect();
        let value = Tensor::from_parts(self.shape(x).to_vec(), data);
        self.push("mul_trailing", value, Op::MulTrailing(x, g))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        self.check(x)?;
        let data = self.data(x).iter().map(|v| scale * v + shift).collect();
        let value = Tensor::from_parts(self.shape(x).to_vec(), data);
        self.push("affine", value, Op::Affine(x, scale))
    }

    /// `s * x` for a single-element `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        self.check(x)?;
        self.check(s)?;
        if self.value(s).numel() != 1 {
            return Err(mismatch("mul_scalar", &[1], self.shape(s)));
        }
        let sv = self.data(s)[0];
        let data = self.data(x).iter().map(|v| sv * v).collect();
        let value = Tensor::from_parts(self.shape(x).to_vec(), data);
        self.push("mul_scalar", value, Op::MulScalar(x, s))
    }

    /// Elementwise product with a constant buffer (dropout masks, one-hots).
    pub fn mul_const(&mut self, x: Var, c: Vec<f64>) -> Result<Var> {
        self.check(x)?;
        if c.len() != self.value(x).numel() {
            return Err(mismatch("mul_const", self.shape(x), &[c.len()]));
        }
        let data = self.data(x).iter().zip(&c).map(|(a, b)| a * b).collect();
        let value = Tensor::from_parts(self.shape(x).to_vec(), data);
        self.push("mul_const", value, Op::MulConst(x, c))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), false, 0.0, &mut out);
        self.push("matmul", Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b))
    }

    /// Batched product `[B,M,K] · [B,K,N] -> [B,M,N]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(mismatch("bmm", sa, sb));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        let (ad, bd) = (self.data(a), self.data(b));
        for i in 0..bs {
            gemm(
                m,
                k,
                n,
                &ad[i * m * k..],
                false,
                &bd[i * k * n..],
                false,
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        self.push("bmm", Tensor::from_parts(vec![bs, m, n], out), Op::BatchMatMul(a, b))
    }

    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(invalid("transpose_last2", "rank must be at least 2"));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let outer = numel(&s[..s.len() - 2]);
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            let base = o * r * c;
            for i in 0..r {
                for j in 0..c {
                    out[base + j * r + i] = xd[base + i * c + j];
                }
            }
        }
        let mut shape = s;
        let nd = shape.len();
        shape.swap(nd - 2, nd - 1);
        self.push("transpose_last2", Tensor::from_parts(shape, out), Op::TransposeLast2(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check(x)?;
        if numel(shape) != self.value(x).numel() {
            return Err(mismatch("reshape", shape, self.shape(x)));
        }
        let value = Tensor::from_parts(shape.to_vec(), self.data(x).to_vec());
        self.push("reshape", value, Op::Reshape(x))
    }

    /// First `len` entries along axis 0.
    pub fn narrow_rows(&mut self, x: Var, len: usize) -> Result<Var> {
        self.check(x)?;
        let s = self.shape(x).to_vec();
        if s.is_empty() || len > s[0] {
            return Err(invalid("narrow_rows", format!("cannot take {len} rows of {s:?}")));
        }
        let row = numel(&s[1..]);
        let mut shape = s;
        shape[0] = len;
        let value = Tensor::from_parts(shape, self.data(x)[..len * row].to_vec());
        self.push("narrow_rows", value, Op::NarrowRows(x))
    }

    /// 1-D convolution (cross-correlation). `x` is `[B,C_in,T]` or `[C_in,T]`,
    /// `w` is `[C_out,C_in,K]`, optional `bias` is `[C_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        if self.shape(x).len() == 2 {
            let s = self.shape(x).to_vec();
            let x3 = self.reshape(x, &[1, s[0], s[1]])?;
            let y = self.conv1d(x3, w, bias, stride, padding)?;
            let ys = self.shape(y).to_vec();
            return self.reshape(y, &[ys[1], ys[2]]);
        }
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 3 || xs[1] != ws[1] {
            return Err(mismatch("conv1d", &ws, &xs));
        }
        if let Some(b) = bias {
            self.check(b)?;
            if self.shape(b) != [ws[0]] {
                return Err(mismatch("conv1d", &[ws[0]], self.shape(b)));
            }
        }
        let (bs, ci, t) = (xs[0], xs[1], xs[2]);
        let (co, k) = (ws[0], ws[2]);
        let tout = conv_out_len(t, k, stride, padding)
            .ok_or_else(|| invalid("conv1d", format!("kernel {k} / stride {stride} invalid for length {t} with padding {padding}")))?;
        let mut out = vec![0.0; bs * co * tout];
        let mut cols = vec![0.0; ci * k * tout];
        let xd = self.data(x);
        let wd = self.data(w);
        for b in 0..bs {
            im2col(&xd[b * ci * t..(b + 1) * ci * t], ci, t, k, stride, padding, tout, &mut cols);
            gemm(co, ci * k, tout, wd, false, &cols, false, 0.0, &mut out[b * co * tout..(b + 1) * co * tout]);
        }
        if let Some(bv) = bias {
            let bd = self.data(bv);
            for b in 0..bs {
                for o in 0..co {
                    out[(b * co + o) * tout..(b * co + o + 1) * tout]
                        .iter_mut()
                        .for_each(|v| *v += bd[o]);
                }
            }
        }
        let value = Tensor::from_parts(vec![bs, co, tout], out);
        self.push(
            "conv1d",
            value,
            Op::Conv1d {
                x,
                w,
                bias,
                stride,
                padding,
            },
        )
    }

    /// Max pooling over the last axis of `[B,C,T]`; padded slots never win.
    pub fn max_pool1d(&mut self, x: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        self.check(x)?;
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(invalid("max_pool1d", "expected [B,C,T]"));
        }
        if padding >= kernel {
            return Err(invalid("max_pool1d", "padding must be smaller than the kernel"));
        }
        let t = xs[2];
        let tout = conv_out_len(t, kernel, stride, padding)
            .ok_or_else(|| invalid("max_pool1d", format!("kernel {kernel} invalid for length {t}")))?;
        let rows = xs[0] * xs[1];
        let xd = self.data(x);
        let mut out = Vec::with_capacity(rows * tout);
        let mut argmax = Vec::with_capacity(rows * tout);
        for r in 0..rows {
            for o in 0..tout {
                let start = (o * stride) as isize - padding as isize;
                let mut best = f64::NEG_INFINITY;
                let mut best_i = usize::MAX;
                for kk in 0..kernel as isize {
                    let p = start + kk;
                    if p < 0 || p >= t as isize {
                        continue;
                    }
                    let idx = r * t + p as usize;
                    if xd[idx] > best {
                        best = xd[idx];
                        best_i = idx;
                    }
                }
                if best_i == usize::MAX {
                    return Err(invalid("max_pool1d", "window covers only padding"));
                }
                out.push(best);
                argmax.push(best_i);
            }
        }
        let value = Tensor::from_parts(vec![xs[0], xs[1], tout], out);
        self.push("max_pool1d", value, Op::MaxPool1d { x, argmax })
    }

    /// Mean over one axis, removing it.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check(x)?;
        let s = self.shape(x).to_vec();
        let (outer, len, inner) = axis_extents(&s, axis)?;
        if len == 0 {
            return Err(invalid("mean_axis", "empty axis"));
        }
        let xd = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..len {
                let row = &xd[(o * len + i) * inner..(o * len + i + 1) * inner];
                out[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(row)
                    .for_each(|(a, b)| *a += b);
            }
        }
        out.iter_mut().for_each(|v| *v /= len as f64);
        let mut shape = s;
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        self.push("mean_axis", Tensor::from_parts(shape, out), Op::MeanAxis { x, axis })
    }

    /// Mean over the time axis of `[B,C,T]`, giving `[B,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let nd = self.shape(x).len();
        if nd < 2 {
            return Err(invalid("global_avg_pool", "rank must be at least 2"));
        }
        self.mean_axis(x, nd - 1)
    }

    fn map(&mut self, name: &'static str, x: Var, f: fn(f64) -> f64, op: Op) -> Result<Var> {
        self.check(x)?;
        let data = self.data(x).iter().map(|v| f(*v)).collect();
        let value = Tensor::from_parts(self.shape(x).to_vec(), data);
        self.push(name, value, op)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.map(
            "gelu",
            x,
            |v| 0.5 * v * (1.0 + tanh(GELU_C * (v + GELU_A * v * v * v))),
            Op::Gelu(x),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, None)
    }

    /// Softmax over the last axis of `[..., T, T]` scores where entries with
    /// `|i - j| > window` get probability exactly zero.
    pub fn banded_softmax(&mut self, x: Var, window: usize) -> Result<Var> {
        self.check(x)?;
        let s = self.shape(x);
        if s.len() < 2 || s[s.len() - 1] != s[s.len() - 2] {
            return Err(invalid("banded_softmax", "expected square trailing dims"));
        }
        let axis = s.len() - 1;
        self.softmax_impl(x, axis, Some(window))
    }

    fn softmax_impl(&mut self, x: Var, axis: usize, band: Option<usize>) -> Result<Var> {
        self.check(x)?;
        let s = self.shape(x).to_vec();
        let (outer, len, inner) = axis_extents(&s, axis)?;
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        if inner == 1 {
            for (o, (row, dst)) in xd.chunks(len).zip(out.chunks_mut(len)).enumerate() {
                let (lo, hi) = match band {
                    Some(w) => {
                        let r = o % len;
                        (r.saturating_sub(w), (r + w + 1).min(len))
                    }
                    None => (0, len),
                };
                let (row, dst) = (&row[lo..hi], &mut dst[lo..hi]);
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for (d, v) in dst.iter_mut().zip(row) {
                    *d = (v - m).exp();
                    z += *d;
                }
                let inv = 1.0 / z;
                dst.iter_mut().for_each(|d| *d *= inv);
            }
            return self.push("softmax", Tensor::from_parts(s, out), Op::Softmax { x, axis });
        }
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * len + i) * inner + j;
                // With a band, `o % len` is the query row (axis is last, inner == 1).
                let (lo, hi) = match band {
                    Some(w) => {
                        let row = o % len;
                        (row.saturating_sub(w), (row + w + 1).min(len))
                    }
                    None => (0, len),
                };
                let mut m = f64::NEG_INFINITY;
                for i in lo..hi {
                    m = m.max(xd[idx(i)]);
                }
                let mut z = 0.0;
                for i in lo..hi {
                    let e = (xd[idx(i)] - m).exp();
                    out[idx(i)] = e;
                    z += e;
                }
                for i in lo..hi {
                    out[idx(i)] /= z;
                }
            }
        }
        self.push("softmax", Tensor::from_parts(s, out), Op::Softmax { x, axis })
    }

    /// Normalizes each slice along `axis` to zero mean and unit (population)
    /// variance; no affine.
    pub fn layer_norm(&mut self, x: Var, axis: usize, eps: f64) -> Result<Var> {
        self.check(x)?;
        let s = self.shape(x).to_vec();
        let (outer, len, inner) = axis_extents(&s, axis)?;
        if len == 0 {
            return Err(invalid("layer_norm", "empty axis"));
        }
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        let mut inv_std = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * len + i) * inner + j;
                let mean = (0..len).map(|i| xd[idx(i)]).sum::<f64>() / len as f64;
                let var = (0..len).map(|i| (xd[idx(i)] - mean).powi(2)).sum::<f64>() / len as f64;
                let is = 1.0 / (var + eps).sqrt();
                for i in 0..len {
                    out[idx(i)] = (xd[idx(i)] - mean) * is;
                }
                inv_std.push(is);
            }
        }
        self.push("layer_norm", Tensor::from_parts(s, out), Op::LayerNorm { x, axis, inv_std })
    }

    /// Batch normalization of `[B,C,T]` per channel with affine `gamma`,
    /// `beta`. With `running = None` batch statistics are used and returned;
    /// otherwise the given (mean, variance) are treated as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<(Var, Option<BatchStats>)> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(invalid("batch_norm", "expected [B,C,T]"));
        }
        let (bs, c, t) = (xs[0], xs[1], xs[2]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(mismatch("batch_norm", &[c], self.shape(gamma)));
        }
        let n = bs * t;
        let xd = self.data(x);
        let (means, vars, stats) = match running {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return Err(mismatch("batch_norm", &[c], &[m.len()]));
                }
                (m.to_vec(), v.to_vec(), None)
            }
            None => {
                let mut means = vec![0.0; c];
                let mut vars = vec![0.0; c];
                for ch in 0..c {
                    let vals = || (0..bs).flat_map(move |b| (0..t).map(move |i| (b * c + ch) * t + i));
                    let mean = vals().map(|i| xd[i]).sum::<f64>() / n as f64;
                    let var = vals().map(|i| (xd[i] - mean).powi(2)).sum::<f64>() / n as f64;
                    means[ch] = mean;
                    vars[ch] = var;
                }
                let unbiased = vars
                    .iter()
                    .map(|v| if n > 1 { v * n as f64 / (n - 1) as f64 } else { *v })
                    .collect();
                let stats = BatchStats {
                    mean: means.clone(),
                    var: unbiased,
                };
                (means, vars, Some(stats))
            }
        };
        let inv_std: Vec<f64> = vars.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gd = self.data(gamma);
        let bd = self.data(beta);
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for b in 0..bs {
            for ch in 0..c {
                let base = (b * c + ch) * t;
                for i in 0..t {
                    let h = (xd[base + i] - means[ch]) * inv_std[ch];
                    xhat[base + i] = h;
                    out[base + i] = gd[ch] * h + bd[ch];
                }
            }
        }
        let batch_stats = stats.is_some();
        let v = self.push(
            "batch_norm",
            Tensor::from_parts(xs, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
        )?;
        Ok((v, stats))
    }

    /// `[B,T,H*d] -> [B*H,T,d]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        self.check(x)?;
        let s = self.shape(x).to_vec();
        if s.len() != 3 || heads == 0 || !s[2].is_multiple_of(heads) {
            return Err(invalid("split_heads", format!("cannot split {s:?} into {heads} heads")));
        }
        let (b, t, d) = (s[0], s[1], s[2] / heads);
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        for bi in 0..b {
            for h in 0..heads {
                for ti in 0..t {
                    let src = (bi * t + ti) * heads * d + h * d;
                    let dst = ((bi * heads + h) * t + ti) * d;
                    out[dst..dst + d].copy_from_slice(&xd[src..src + d]);
                }
            }
        }
        self.push("split_heads", Tensor::from_parts(vec![b * heads, t, d], out), Op::SplitHeads { x, heads })
    }

    /// `[B*H,T,d] -> [B,T,H*d]`.
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        self.check(x)?;
        let s = self.shape(x).to_vec();
        if s.len() != 3 || heads == 0 || !s[0].is_multiple_of(heads) {
            return Err(invalid("merge_heads", format!("cannot merge {s:?} from {heads} heads")));
        }
        let (b, t, d) = (s[0] / heads, s[1], s[2]);
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        for bi in 0..b {
            for h in 0..heads {
                for ti in 0..t {
                    let dst = (bi * t + ti) * heads * d + h * d;
                    let src = ((bi * heads + h) * t + ti) * d;
                    out[dst..dst + d].copy_from_slice(&xd[src..src + d]);
                }
            }
        }
        self.push("merge_heads", Tensor::from_parts(vec![b, t, heads * d], out), Op::MergeHeads { x, heads })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let s = self.data(x).iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let n = self.value(x).numel().max(1);
        let s = self.data(x).iter().sum::<f64>() / n as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(x))
    }

    /// Scalar `sum(x * w)` for a constant weight buffer.
    pub fn dot_const(&mut self, x: Var, w: Vec<f64>) -> Result<Var> {
        self.check(x)?;
        if w.len() != self.value(x).numel() {
            return Err(mismatch("dot_const", self.shape(x), &[w.len()]));
        }
        let s = self.data(x).iter().zip(&w).map(|(a, b)| a * b).sum();
        self.push("dot_const", Tensor::scalar(s), Op::DotConst(x, w))
    }

    /// Mean Huber loss of `pred` against a constant target.
    pub fn huber(&mut self, pred: Var, target: &[f64], delta: f64) -> Result<Var> {
        self.check(pred)?;
        if target.len() != self.value(pred).numel() {
            return Err(mismatch("huber", self.shape(pred), &[target.len()]));
        }
        if delta <= 0.0 {
            return Err(invalid("huber", "delta must be positive"));
        }
        let n = target.len().max(1) as f64;
        let loss = self
            .data(pred)
            .iter()
            .zip(target)
            .map(|(p, y)| huber_value(p - y, delta))
            .sum::<f64>()
            / n;
        self.push(
            "huber",
            Tensor::scalar(loss),
            Op::Huber {
                pred,
                target: target.to_vec(),
                delta,
            },
        )
    }

    /// Mean cross-entropy of `[B,K]` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.check(logits)?;
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(mismatch("cross_entropy", &[labels.len(), 0], &s));
        }
        let (b, k) = (s[0], s[1]);
        if let Some(&label) = labels.iter().find(|&&l| l >= k) {
            return Err(NumericError::LabelOutOfRange { label, classes: k });
        }
        let ld = self.data(logits);
        let mut probs = vec![0.0; b * k];
        let mut loss = 0.0;
        for i in 0..b {
            let row = &ld[i * k..(i + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let lse = m + z.ln();
            loss += lse - row[labels[i]];
            for j in 0..k {
                probs[i * k + j] = (row[j] - lse).exp();
            }
        }
        loss /= b.max(1) as f64;
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// Gradients of the scalar `loss` with respect to every node that
    /// requires grad, intermediate nodes included.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(NumericError::Cyclic {
                node: loss.0,
                consumer: self.nodes.len(),
            });
        }
        let shape = self.shape(loss);
        if numel(shape) != 1 {
            return Err(NumericError::NotScalar(shape.to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(NumericError::Detached(loss.0));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            for input in node.op.inputs() {
                if input.0 >= id {
                    return Err(NumericError::Cyclic {
                        node: input.0,
                        consumer: id,
                    });
                }
            }
            self.backprop_node(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[id];
        let out = node.value.data();
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            debug_assert_eq!(contrib.len(), self.nodes[v.0].value.numel());
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(contrib),
            }
        };
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                if rg(*a) {
                    acc(*a, g.iter().zip(bd).map(|(x, y)| x * y).collect());
                }
                if rg(*b) {
                    acc(*b, g.iter().zip(ad).map(|(x, y)| x * y).collect());
                }
            }
            Op::AddTrailing(x, b) => {
                acc(*x, g.to_vec());
                if rg(*b) {
                    let nb = self.value(*b).numel();
                    let mut gb = vec![0.0; nb];
                    for row in g.chunks(nb) {
                        gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                    acc(*b, gb);
                }
            }
            Op::MulTrailing(x, w) => {
                let (xd, wd) = (self.data(*x), self.data(*w));
                let nw = wd.len();
                if rg(*x) {
                    acc(*x, g.chunks(nw).flat_map(|row| row.iter().zip(wd).map(|(v, c)| v * c)).collect());
                }
                if rg(*w) {
                    let mut gw = vec![0.0; nw];
                    for (row, xr) in g.chunks(nw).zip(xd.chunks(nw)) {
                        for ((a, v), xv) in gw.iter_mut().zip(row).zip(xr) {
                            *a += v * xv;
                        }
                    }
                    acc(*w, gw);
                }
            }
            Op::Affine(x, scale) => acc(*x, g.iter().map(|v| v * scale).collect()),
            Op::MulScalar(x, s) => {
                let sv = self.data(*s)[0];
                if rg(*x) {
                    acc(*x, g.iter().map(|v| v * sv).collect());
                }
                if rg(*s) {
                    let d = g.iter().zip(self.data(*x)).map(|(a, b)| a * b).sum();
                    acc(*s, vec![d]);
                }
            }
            Op::MulConst(x, c) => acc(*x, g.iter().zip(c).map(|(a, b)| a * b).collect()),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if rg(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g, false, self.data(*b), true, 0.0, &mut ga);
                    acc(*a, ga);
                }
                if rg(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, self.data(*a), true, g, false, 0.0, &mut gb);
                    acc(*b, gb);
                }
            }
            Op::BatchMatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (ad, bd) = (self.data(*a), self.data(*b));
                if rg(*a) {
                    let mut ga = vec![0.0; bs * m * k];
                    for i in 0..bs {
                        gemm(m, n, k, &g[i * m * n..], false, &bd[i * k * n..], true, 0.0, &mut ga[i * m * k..(i + 1) * m * k]);
                    }
                    acc(*a, ga);
                }
                if rg(*b) {
                    let mut gb = vec![0.0; bs * k * n];
                    for i in 0..bs {
                        gemm(k, m, n, &ad[i * m * k..], true, &g[i * m * n..], false, 0.0, &mut gb[i * k * n..(i + 1) * k * n]);
                    }
                    acc(*b, gb);
                }
            }
            Op::TransposeLast2(x) => {
                let s = self.shape(*x);
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                let outer = numel(&s[..s.len() - 2]);
                let mut gx = vec![0.0; g.len()];
                for o in 0..outer {
                    let base = o * r * c;
                    for i in 0..r {
                        for j in 0..c {
                            gx[base + i * c + j] = g[base + j * r + i];
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::NarrowRows(x) => {
                let mut gx = vec![0.0; self.value(*x).numel()];
                gx[..g.len()].copy_from_slice(g);
                acc(*x, gx);
            }
            Op::Conv1d {
                x,
                w,
                bias,
                stride,
                padding,
            } => {
                let xs = self.shape(*x);
                let ws = self.shape(*w);
                let (bs, ci, t) = (xs[0], xs[1], xs[2]);
                let (co, k) = (ws[0], ws[2]);
                let tout = node.value.shape()[2];
                let xd = self.data(*x);
                let wd = self.data(*w);
                let mut gw = vec![0.0; co * ci * k];
                let mut gx = vec![0.0; xd.len()];
                let mut cols = vec![0.0; ci * k * tout];
                let mut dcols = vec![0.0; ci * k * tout];
                for b in 0..bs {
                    let gb = &g[b * co * tout..(b + 1) * co * tout];
                    if rg(*w) {
                        im2col(&xd[b * ci * t..(b + 1) * ci * t], ci, t, k, *stride, *padding, tout, &mut cols);
                        gemm(co, tout, ci * k, gb, false, &cols, true, 1.0, &mut gw);
                    }
                    if rg(*x) {
                        gemm(ci * k, co, tout, wd, true, gb, false, 0.0, &mut dcols);
                        col2im(&dcols, ci, t, k, *stride, *padding, tout, &mut gx[b * ci * t..(b + 1) * ci * t]);
                    }
                }
                if rg(*x) {
                    acc(*x, gx);
                }
                if rg(*w) {
                    acc(*w, gw);
                }
                if let Some(bv) = bias {
                    if rg(*bv) {
                        let mut gbias = vec![0.0; co];
                        for b in 0..bs {
                            for (o, gb) in gbias.iter_mut().enumerate() {
                                *gb += g[(b * co + o) * tout..(b * co + o + 1) * tout].iter().sum::<f64>();
                            }
                        }
                        acc(*bv, gbias);
                    }
                }
            }
            Op::MaxPool1d { x, argmax } => {
                let mut gx = vec![0.0; self.value(*x).numel()];
                for (gv, &i) in g.iter().zip(argmax) {
                    gx[i] += gv;
                }
                acc(*x, gx);
            }
            Op::MeanAxis { x, axis } => {
                let (outer, len, inner) = axis_extents(self.shape(*x), *axis)?;
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for i in 0..len {
                        for j in 0..inner {
                            gx[(o * len + i) * inner + j] = g[o * inner + j] / len as f64;
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::Relu(x) => {
                let xd = self.data(*x);
                acc(*x, g.iter().zip(xd).map(|(gv, v)| if *v > 0.0 { *gv } else { 0.0 }).collect());
            }
            Op::Gelu(x) => {
                let xd = self.data(*x);
                acc(
                    *x,
                    g.iter()
                        .zip(xd)
                        .map(|(gv, &v)| {
                            let u = GELU_C * (v + GELU_A * v * v * v);
                            let th = tanh(u);
                            let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                            gv * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du)
                        })
                        .collect(),
                );
            }
            Op::Sigmoid(x) => acc(*x, g.iter().zip(out).map(|(gv, y)| gv * y * (1.0 - y)).collect()),
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_extents(node.value.shape(), *axis)?;
                let mut gx = vec![0.0; g.len()];
                if inner == 1 {
                    for ((gr, yr), dst) in g.chunks(len).zip(out.chunks(len)).zip(gx.chunks_mut(len)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((d, gv), y) in dst.iter_mut().zip(gr).zip(yr) {
                            *d = y * (gv - dot);
                        }
                    }
                    acc(*x, gx);
                    return Ok(());
                }
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |i: usize| (o * len + i) * inner + j;
                        let dot: f64 = (0..len).map(|i| g[idx(i)] * out[idx(i)]).sum();
                        for i in 0..len {
                            gx[idx(i)] = out[idx(i)] * (g[idx(i)] - dot);
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::LayerNorm { x, axis, inv_std } => {
                let (outer, len, inner) = axis_extents(node.value.shape(), *axis)?;
                let mut gx = vec![0.0; g.len()];
                let n = len as f64;
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |i: usize| (o * len + i) * inner + j;
                        let gm: f64 = (0..len).map(|i| g[idx(i)]).sum::<f64>() / n;
                        let gxm: f64 = (0..len).map(|i| g[idx(i)] * out[idx(i)]).sum::<f64>() / n;
                        let is = inv_std[o * inner + j];
                        for i in 0..len {
                            gx[idx(i)] = is * (g[idx(i)] - gm - out[idx(i)] * gxm);
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let xs = self.shape(*x);
                let (bs, c, t) = (xs[0], xs[1], xs[2]);
                let gd = self.data(*gamma);
                let n = (bs * t) as f64;
                let mut ggamma = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                for b in 0..bs {
                    for ch in 0..c {
                        let base = (b * c + ch) * t;
                        for i in 0..t {
                            ggamma[ch] += g[base + i] * xhat[base + i];
                            gbeta[ch] += g[base + i];
                        }
                    }
                }
                if rg(*x) {
                    let mut gx = vec![0.0; g.len()];
                    for ch in 0..c {
                        // sum(dxhat) and sum(dxhat * xhat) with dxhat = g * gamma
                        let sd = gbeta[ch] * gd[ch];
                        let sdx = ggamma[ch] * gd[ch];
                        for b in 0..bs {
                            let base = (b * c + ch) * t;
                            for i in 0..t {
                                let dxh = g[base + i] * gd[ch];
                                gx[base + i] = if *batch_stats {
                                    inv_std[ch] / n * (n * dxh - sd - xhat[base + i] * sdx)
                                } else {
                                    dxh * inv_std[ch]
                                };
                            }
                        }
                    }
                    acc(*x, gx);
                }
                acc(*gamma, ggamma);
                acc(*beta, gbeta);
            }
            Op::SplitHeads { x, heads } => {
                let s = node.value.shape();
                let (bh, t, d) = (s[0], s[1], s[2]);
                let b = bh / heads;
                let mut gx = vec![0.0; g.len()];
                for bi in 0..b {
                    for h in 0..*heads {
                        for ti in 0..t {
                            let dst = (bi * t + ti) * heads * d + h * d;
                            let src = ((bi * heads + h) * t + ti) * d;
                            gx[dst..dst + d].copy_from_slice(&g[src..src + d]);
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::MergeHeads { x, heads } => {
                let s = self.shape(*x);
                let (bh, t, d) = (s[0], s[1], s[2]);
                let b = bh / heads;
                let mut gx = vec![0.0; g.len()];
                for bi in 0..b {
                    for h in 0..*heads {
                        for ti in 0..t {
                            let src = (bi * t + ti) * heads * d + h * d;
                            let dst = ((bi * heads + h) * t + ti) * d;
                            gx[dst..dst + d].copy_from_slice(&g[src..src + d]);
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::Sum(x) => acc(*x, vec![g[0]; self.value(*x).numel()]),
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                acc(*x, vec![g[0] / n.max(1) as f64; n]);
            }
            Op::DotConst(x, w) => acc(*x, w.iter().map(|v| v * g[0]).collect()),
            Op::Huber { pred, target, delta } => {
                let n = target.len().max(1) as f64;
                acc(
                    *pred,
                    self.data(*pred)
                        .iter()
                        .zip(target)
                        .map(|(p, y)| g[0] * (p - y).clamp(-delta, *delta) / n)
                        .collect(),
                );
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = self.shape(*logits)[1];
                let b = labels.len().max(1) as f64;
                let mut gl: Vec<f64> = probs.iter().map(|p| g[0] * p / b).collect();
                for (i, &l) in labels.iter().enumerate() {
                    gl[i * k + l] -= g[0] / b;
                }
                acc(*logits, gl);
            }
        }
        Ok(())
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn huber_value(r: f64, delta: f64) -> f64 {
    if r.abs() <= delta {
        0.5 * r * r
    } else {
        delta * (r.abs() - 0.5 * delta)
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f64], ci: usize, t: usize, k: usize, stride: usize, padding: usize, tout: usize, cols: &mut [f64]) {
    for c in 0..ci {
        for kk in 0..k {
            let row = &mut cols[(c * k + kk) * tout..(c * k + kk + 1) * tout];
            for (o, slot) in row.iter_mut().enumerate() {
                let p = (o * stride + kk) as isize - padding as isize;
                *slot = if p >= 0 && (p as usize) < t { x[c * t + p as usize] } else { 0.0 };
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(cols: &[f64], ci: usize, t: usize, k: usize, stride: usize, padding: usize, tout: usize, x: &mut [f64]) {
    for c in 0..ci {
        for kk in 0..k {
            let row = &cols[(c * k + kk) * tout..(c * k + kk + 1) * tout];
            for (o, v) in row.iter().enumerate() {
                let p = (o * stride + kk) as isize - padding as isize;
                if p >= 0 && (p as usize) < t {
                    x[c * t + p as usize] += v;
                }
            }
        }
    }
}
