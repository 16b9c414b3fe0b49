//! Tape of recorded tensor operations with reverse-mode gradients.
//!
//! Every op appends one node whose inputs were recorded earlier, so the node
//! list is already in topological order and [`Graph::backward`] simply walks
//! it in reverse. The graph lives for one forward/backward pass.

use super::tensor::{numel, split_axis, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEF: f64 = 0.044_715;
/// Stand-in for `ln(0)` on masked attention logits.
pub const MASKED_LOGIT: f64 = -1e9;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    AddBroadcast(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    MeanAxis {
        x: Var,
        axis: usize,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    MaskedSoftmax {
        logits: Var,
        mask: Var,
        shifted_exp: Vec<f64>,
        norm: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Relu(Var),
    Gelu(Var),
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    ExpandBatch(Var),
    Gather {
        x: Var,
        index: Vec<Vec<usize>>,
    },
    RepeatInterleave {
        x: Var,
        repeats: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Mse(Var, Var),
    StraightThrough(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::BatchMatMul { .. } => "bmm",
            Op::Add(..) => "add",
            Op::AddBroadcast(..) => "add_broadcast",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::MeanAxis { .. } => "mean_axis",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::MaskedSoftmax { .. } => "masked_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Relu(..) => "relu",
            Op::Gelu(..) => "gelu",
            Op::Reshape(..) => "reshape",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::ExpandBatch(..) => "expand_batch",
            Op::Gather { .. } => "gather",
            Op::RepeatInterleave { .. } => "repeat_interleave",
            Op::Embedding { .. } => "embedding",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Mse(..) => "mse",
            Op::StraightThrough(..) => "straight_through",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::AddBroadcast(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Mse(a, b)
            | Op::BatchMatMul { a, b, .. } => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Relu(x)
            | Op::Gelu(x)
            | Op::Reshape(x)
            | Op::ExpandBatch(x)
            | Op::StraightThrough(x)
            | Op::MeanAxis { x, .. }
            | Op::Softmax { x, .. }
            | Op::LogSoftmax { x, .. }
            | Op::Slice { x, .. }
            | Op::Gather { x, .. }
            | Op::RepeatInterleave { x, .. } => vec![*x],
            Op::MaskedSoftmax { logits, mask, .. } => vec![*logits, *mask],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Embedding { table, .. } => vec![*table],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Recording of one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

/// `c = a·b (+ beta·c)` for strided row/column layouts.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
    (rsc, csc): (isize, isize),
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices cover every index reachable from the given strides,
    // which callers derive from the operand shapes checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

fn gelu(x: f64) -> f64 {
    let inner = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x)
}

fn is_suffix(shape: &[usize], suffix: &[usize]) -> bool {
    suffix.len() <= shape.len() && shape[shape.len() - suffix.len()..] == *suffix
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the loss with respect to a leaf, after [`Graph::backward`].
    /// Leaves the loss does not reach report `None`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor, zero-filled when the leaf was not reached.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let shape = self.shape(v).to_vec();
        let data = self
            .grad(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; numel(&shape)]);
        Tensor::new(shape, data).expect("gradient matches node shape")
    }

    /// Records a leaf; it tracks gradients iff `t.requires_grad`.
    pub fn leaf(&mut self, mut t: Tensor) -> Var {
        let requires_grad = t.requires_grad;
        t.grad = None;
        self.nodes.push(Node {
            value: t,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a copy of a parameter tensor.
    pub fn param(&mut self, t: &Tensor, trainable: bool) -> Var {
        let mut value = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid tensor");
        value.requires_grad = trainable;
        self.leaf(value)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.requires_grad = false;
        self.leaf(t)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        let inputs = op.inputs();
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        if cfg!(debug_assertions)
            && !value.is_finite()
            && inputs.iter().all(|v| self.nodes[v.0].value.is_finite())
        {
            return Err(Error::NonFinite { op: op.name() });
        }
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).expect("op produced consistent shape")
    }

    // ---- linear algebra -------------------------------------------------

    /// `[m,k] · [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.data(a),
            (k as isize, 1),
            self.data(b),
            (n as isize, 1),
            &mut out,
            (n as isize, 1),
            0.0,
        );
        self.push(Self::tensor(vec![m, n], out), Op::MatMul(a, b))
    }

    /// Batched product `[B,m,k] · [B,k,n]`, or `[B,m,k] · [B,n,k]ᵀ` when
    /// `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0];
        let (k_b, n) = if trans_b {
            (sb.get(2), sb.get(1))
        } else {
            (sb.get(1), sb.get(2))
        };
        if !ok || k_b != Some(&sa[2]) {
            return Err(Error::shape("bmm", &sa, &sb));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], *n.unwrap());
        let b_strides = if trans_b {
            (1, k as isize)
        } else {
            (n as isize, 1)
        };
        let mut out = vec![0.0; batch * m * n];
        let (da, db) = (self.data(a), self.data(b));
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &da[i * m * k..],
                (k as isize, 1),
                &db[i * k * n..],
                b_strides,
                &mut out[i * m * n..],
                (n as isize, 1),
                0.0,
            );
        }
        self.push(
            Self::tensor(vec![batch, m, n], out),
            Op::BatchMatMul { a, b, trans_b },
        )
    }

    // ---- elementwise ----------------------------------------------------

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(name, self.shape(a), self.shape(b)));
        }
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(Self::tensor(shape, data), op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s (bias rows,
    /// positional tables).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if !is_suffix(&sa, &sb) {
            return Err(Error::shape("add_broadcast", &sa, &sb));
        }
        let db = self.data(b);
        let period = db.len().max(1);
        let data = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + db[i % period])
            .collect();
        self.push(Self::tensor(sa, data), Op::AddBroadcast(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let data = self.data(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push(Self::tensor(shape, data), Op::Scale(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let data = self.data(x).iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        self.push(Self::tensor(shape, data), Op::Relu(x))
    }

    /// GELU, tanh approximation:
    /// `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let data = self.data(x).iter().map(|&v| gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(Self::tensor(shape, data), Op::Gelu(x))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(Error::EmptyDimension { op: "mean" });
        }
        let s: f64 = self.data(x).iter().sum();
        self.push(Tensor::scalar(s / n as f64), Op::Mean(x))
    }

    /// Arithmetic mean along `axis`; the axis is removed.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis)?;
        if len == 0 {
            return Err(Error::EmptyDimension { op: "mean_axis" });
        }
        let src = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let row = &src[(o * len + j) * inner..][..inner];
                for (acc, v) in out[o * inner..][..inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let inv = 1.0 / len as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut out_shape = shape;
        out_shape.remove(axis);
        self.push(Self::tensor(out_shape, out), Op::MeanAxis { x, axis })
    }

    // ---- normalisation ----------------------------------------------------

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis)?;
        if len == 0 {
            return Err(Error::EmptyDimension { op: "softmax" });
        }
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mx = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..len {
                    let e = (src[at(j)] - mx).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    out[at(j)] /= z;
                }
            }
        }
        self.push(Self::tensor(shape, out), Op::Softmax { x, axis })
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis)?;
        if len == 0 {
            return Err(Error::EmptyDimension { op: "log_softmax" });
        }
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mx = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + (0..len).map(|j| (src[at(j)] - mx).exp()).sum::<f64>().ln();
                for j in 0..len {
                    out[at(j)] = src[at(j)] - lse;
                }
            }
        }
        self.push(Self::tensor(shape, out), Op::LogSoftmax { x, axis })
    }

    /// Softmax over the last axis of `logits[b, .., n]` with per-key weights
    /// `mask[b, n]` shared across the middle axes.
    ///
    /// Equal to `softmax(logits + ln(mask))` with `ln(0)` mapped to
    /// [`MASKED_LOGIT`]: zero-weight keys get exactly zero attention. The
    /// weights enter as `mask_j·exp(logit_j)`, so positive entries get the
    /// exact gradient. At an entry that is exactly zero the derivative
    /// `exp(logit_j)/Z` is unbounded in the logit gap, so the gradient there is
    /// the first-order effect of switching the key fully on, which replaces
    /// `Z` by `Z + exp(logit_j)` and stays bounded.
    pub fn masked_softmax(&mut self, logits: Var, mask: Var) -> Result<Var> {
        let (sl, sm) = (self.shape(logits).to_vec(), self.shape(mask).to_vec());
        if sl.len() < 2 || sm.len() != 2 || sm[0] != sl[0] || sm[1] != sl[sl.len() - 1] {
            return Err(Error::shape("masked_softmax", &sl, &sm));
        }
        let (batch, n) = (sm[0], sm[1]);
        if n == 0 {
            return Err(Error::EmptyDimension { op: "masked_softmax" });
        }
        let rows_per_batch = numel(&sl) / (batch * n);
        let (src, weights) = (self.data(logits), self.data(mask));
        let mut out = vec![0.0; src.len()];
        let mut shifted_exp = vec![0.0; src.len()];
        let mut norm = vec![0.0; batch * rows_per_batch];
        for b in 0..batch {
            let w = &weights[b * n..][..n];
            if w.iter().all(|&m| m <= 0.0) {
                return Err(Error::NoAttendableKeys);
            }
            for r in 0..rows_per_batch {
                let row = (b * rows_per_batch + r) * n;
                let s = &src[row..][..n];
                let mx = s
                    .iter()
                    .zip(w)
                    .filter(|(_, &m)| m > 0.0)
                    .map(|(&v, _)| v)
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..n {
                    let e = (s[j] - mx).min(700.0).exp();
                    shifted_exp[row + j] = e;
                    z += w[j].max(0.0) * e;
                }
                for j in 0..n {
                    out[row + j] = w[j].max(0.0) * shifted_exp[row + j] / z;
                }
                norm[b * rows_per_batch + r] = z;
            }
        }
        self.push(
            Self::tensor(sl, out),
            Op::MaskedSoftmax {
                logits,
                mask,
                shifted_exp,
                norm,
            },
        )
    }

    /// Layer normalisation over the last axis (biased variance).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if d == 0 {
            return Err(Error::EmptyDimension { op: "layer_norm" });
        }
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape("layer_norm", &shape, self.shape(gain)));
        }
        let src = self.data(x);
        let (g, bvec) = (self.data(gain), self.data(bias));
        let rows = src.len() / d;
        let mut normed = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..][..d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mu) * is;
                normed[r * d + j] = h;
                out[r * d + j] = h * g[j] + bvec[j];
            }
        }
        self.push(
            Self::tensor(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            },
        )
    }

    // ---- shape manipulation ---------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).numel() {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let data = self.data(x).to_vec();
        self.push(Self::tensor(shape.to_vec(), data), Op::Reshape(x))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(inputs[0]).to_vec();
        let (outer, _, inner) = split_axis(&first, axis)?;
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis];
                out.extend_from_slice(&self.data(v)[o * len * inner..][..len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.push(
            Self::tensor(shape, out),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        )
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis)?;
        if start + len > n {
            return Err(Error::shape("slice", &shape, &[start, len]));
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * n + start) * inner..][..len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.push(Self::tensor(out_shape, out), Op::Slice { x, axis, start })
    }

    /// Prepends a batch axis holding `batch` copies of `x`.
    pub fn expand_batch(&mut self, x: Var, batch: usize) -> Result<Var> {
        let src = self.data(x);
        let mut out = Vec::with_capacity(src.len() * batch);
        for _ in 0..batch {
            out.extend_from_slice(src);
        }
        let mut shape = vec![batch];
        shape.extend_from_slice(self.shape(x));
        self.push(Self::tensor(shape, out), Op::ExpandBatch(x))
    }

    /// Picks rows along axis 1 per batch element: `x[B, T, ..]` with
    /// `index[b]` of common length `S` gives `[B, S, ..]`.
    pub fn gather(&mut self, x: Var, index: &[Vec<usize>]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || index.len() != shape[0] {
            return Err(Error::shape("gather", &shape, &[index.len()]));
        }
        let picks = index.first().map_or(0, Vec::len);
        if index.iter().any(|row| row.len() != picks || row.iter().any(|&t| t >= shape[1])) {
            return Err(Error::shape("gather", &shape, &[index.len(), picks]));
        }
        let row = numel(&shape[2..]);
        let src = self.data(x);
        let mut out = Vec::with_capacity(shape[0] * picks * row);
        for (b, idx) in index.iter().enumerate() {
            for &t in idx {
                out.extend_from_slice(&src[(b * shape[1] + t) * row..][..row]);
            }
        }
        let mut out_shape = shape;
        out_shape[1] = picks;
        self.push(
            Self::tensor(out_shape, out),
            Op::Gather {
                x,
                index: index.to_vec(),
            },
        )
    }

    /// Repeats each entry of the last axis `repeats` times in place.
    pub fn repeat_interleave(&mut self, x: Var, repeats: usize) -> Result<Var> {
        let mut shape = self.shape(x).to_vec();
        let Some(last) = shape.last_mut() else {
            return Err(Error::EmptyDimension { op: "repeat_interleave" });
        };
        *last *= repeats;
        let out = self
            .data(x)
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, repeats))
            .collect();
        self.push(Self::tensor(shape, out), Op::RepeatInterleave { x, repeats })
    }

    /// Row lookup `table[ids]`; output shape is `ids_shape + [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], ids_shape: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 || numel(ids_shape) != ids.len() {
            return Err(Error::shape("embedding", &ts, ids_shape));
        }
        let (vocab, d) = (ts[0], ts[1]);
        if let Some(&id) = ids.iter().find(|&&id| id >= vocab) {
            return Err(Error::OutOfVocabulary { id, vocab });
        }
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&src[id * d..][..d]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(d);
        self.push(
            Self::tensor(shape, out),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Copy of `x`'s value with no gradient path.
    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.constant(t)
    }

    /// Forward value `hard`, gradient passed unchanged to `soft`.
    pub fn straight_through(&mut self, hard: Tensor, soft: Var) -> Result<Var> {
        if hard.shape() != self.shape(soft) {
            return Err(Error::shape("straight_through", hard.shape(), self.shape(soft)));
        }
        self.push(hard, Op::StraightThrough(soft))
    }

    // ---- losses ---------------------------------------------------------

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::shape("cross_entropy", &shape, &[targets.len()]));
        }
        let (rows, k) = (shape[0], shape[1]);
        if let Some(&index) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::TargetOutOfRange { index, classes: k });
        }
        let src = self.data(logits);
        let mut probs = vec![0.0; src.len()];
        let mut loss = 0.0;
        for r in 0..rows {
            let row = &src[r * k..][..k];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            for j in 0..k {
                probs[r * k + j] = (row[j] - mx).exp() / z;
            }
            loss += mx + z.ln() - row[targets[r]];
        }
        loss /= rows as f64;
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mse", self.shape(a), self.shape(b)));
        }
        let n = self.value(a).numel().max(1);
        let s: f64 = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        self.push(Tensor::scalar(s / n as f64), Op::Mse(a, b))
    }

    // ---- backward -------------------------------------------------------

    /// Propagates gradients from a scalar `loss` to every reachable leaf that
    /// tracks gradients. May run once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            self.grads = grads;
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(gout);
                continue;
            }
            propagate(&self.nodes, i, &gout, &mut grads);
        }
        self.grads = grads;
        Ok(())
    }
}

/// Gradient buffer for `v`, allocated on first use; `None` when `v` does not
/// track gradients.
fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn add_into(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    if let Some(s) = slot(nodes, grads, v) {
        s.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
}

fn propagate(nodes: &[Node], out: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[out];
    let val = |v: Var| nodes[v.0].value.data();
    let shp = |v: Var| nodes[v.0].value.shape();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k, n) = (shp(*a)[0], shp(*a)[1], shp(*b)[1]);
            if let Some(ga) = slot(nodes, grads, *a) {
                gemm(m, n, k, gout, (n as isize, 1), val(*b), (1, n as isize), ga, (k as isize, 1), 1.0);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                gemm(k, m, n, val(*a), (1, k as isize), gout, (n as isize, 1), gb, (n as isize, 1), 1.0);
            }
        }
        Op::BatchMatMul { a, b, trans_b } => {
            let (batch, m, k) = (shp(*a)[0], shp(*a)[1], shp(*a)[2]);
            let n = node.value.shape()[2];
            // Strides of the logical [k, n] operand and of its transpose.
            let (b_t, gb_strides) = if *trans_b {
                ((k as isize, 1), (1, k as isize))
            } else {
                ((1, n as isize), (n as isize, 1))
            };
            if let Some(ga) = slot(nodes, grads, *a) {
                let vb = val(*b);
                for i in 0..batch {
                    gemm(
                        m,
                        n,
                        k,
                        &gout[i * m * n..],
                        (n as isize, 1),
                        &vb[i * k * n..],
                        b_t,
                        &mut ga[i * m * k..],
                        (k as isize, 1),
                        1.0,
                    );
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                let va = val(*a);
                for i in 0..batch {
                    gemm(
                        k,
                        m,
                        n,
                        &va[i * m * k..],
                        (1, k as isize),
                        &gout[i * m * n..],
                        (n as isize, 1),
                        &mut gb[i * k * n..],
                        gb_strides,
                        1.0,
                    );
                }
            }
        }
        Op::Add(a, b) => {
            add_into(nodes, grads, *a, gout);
            add_into(nodes, grads, *b, gout);
        }
        Op::AddBroadcast(a, b) => {
            add_into(nodes, grads, *a, gout);
            if let Some(gb) = slot(nodes, grads, *b) {
                let period = gb.len().max(1);
                for (i, g) in gout.iter().enumerate() {
                    gb[i % period] += g;
                }
            }
        }
        Op::Sub(a, b) => {
            add_into(nodes, grads, *a, gout);
            if let Some(gb) = slot(nodes, grads, *b) {
                gb.iter_mut().zip(gout).for_each(|(x, g)| *x -= g);
            }
        }
        Op::Mul(a, b) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((x, g), y) in ga.iter_mut().zip(gout).zip(val(*b)) {
                    *x += g * y;
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for ((x, g), y) in gb.iter_mut().zip(gout).zip(val(*a)) {
                    *x += g * y;
                }
            }
        }
        Op::Scale(x, c) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().zip(gout).for_each(|(a, g)| *a += g * c);
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().for_each(|a| *a += gout[0]);
            }
        }
        Op::Mean(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                let g = gout[0] / gx.len() as f64;
                gx.iter_mut().for_each(|a| *a += g);
            }
        }
        Op::MeanAxis { x, axis } => {
            let (outer, len, inner) = split_axis(shp(*x), *axis).expect("checked in forward");
            if let Some(gx) = slot(nodes, grads, *x) {
                let inv = 1.0 / len as f64;
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            gx[(o * len + j) * inner + i] += gout[o * inner + i] * inv;
                        }
                    }
                }
            }
        }
        Op::Softmax { x, axis } => {
            let (outer, len, inner) = split_axis(shp(*x), *axis).expect("checked in forward");
            let y = node.value.data();
            if let Some(gx) = slot(nodes, grads, *x) {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len).map(|j| y[at(j)] * gout[at(j)]).sum();
                        for j in 0..len {
                            gx[at(j)] += y[at(j)] * (gout[at(j)] - dot);
                        }
                    }
                }
            }
        }
        Op::LogSoftmax { x, axis } => {
            let (outer, len, inner) = split_axis(shp(*x), *axis).expect("checked in forward");
            let y = node.value.data();
            if let Some(gx) = slot(nodes, grads, *x) {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let total: f64 = (0..len).map(|j| gout[at(j)]).sum();
                        for j in 0..len {
                            gx[at(j)] += gout[at(j)] - y[at(j)].exp() * total;
                        }
                    }
                }
            }
        }
        Op::MaskedSoftmax {
            logits,
            mask,
            shifted_exp,
            norm,
        } => {
            let (batch, n) = (shp(*mask)[0], shp(*mask)[1]);
            let rows_per_batch = norm.len() / batch;
            let y = node.value.data();
            // g_j - Σ_k y_k g_k, per row
            let mut centered = vec![0.0; y.len()];
            for row in 0..norm.len() {
                let r = row * n;
                let dot: f64 = (0..n).map(|j| y[r + j] * gout[r + j]).sum();
                for j in 0..n {
                    centered[r + j] = gout[r + j] - dot;
                }
            }
            if let Some(gl) = slot(nodes, grads, *logits) {
                for ((a, yv), c) in gl.iter_mut().zip(y).zip(&centered) {
                    *a += yv * c;
                }
            }
            if let Some(gm) = slot(nodes, grads, *mask) {
                for b in 0..batch {
                    for rr in 0..rows_per_batch {
                        let row = b * rows_per_batch + rr;
                        let z = norm[row];
                        let w = &nodes[mask.0].value.data()[b * n..][..n];
                        for j in 0..n {
                            let e = shifted_exp[row * n + j];
                            let denom = if w[j] > 0.0 { z } else { z + e };
                            gm[b * n + j] += e / denom * centered[row * n + j];
                        }
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            normed,
            inv_std,
        } => {
            let d = shp(*gain)[0];
            let g = val(*gain);
            if let Some(gx) = slot(nodes, grads, *x) {
                for (r, is) in inv_std.iter().enumerate() {
                    let base = r * d;
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..d {
                        let dh = gout[base + j] * g[j];
                        mean_dh += dh;
                        mean_dh_h += dh * normed[base + j];
                    }
                    mean_dh /= d as f64;
                    mean_dh_h /= d as f64;
                    for j in 0..d {
                        let dh = gout[base + j] * g[j];
                        gx[base + j] += is * (dh - mean_dh - normed[base + j] * mean_dh_h);
                    }
                }
            }
            if let Some(gg) = slot(nodes, grads, *gain) {
                for (i, (go, h)) in gout.iter().zip(normed).enumerate() {
                    gg[i % d] += go * h;
                }
            }
            if let Some(gb) = slot(nodes, grads, *bias) {
                for (i, go) in gout.iter().enumerate() {
                    gb[i % d] += go;
                }
            }
        }
        Op::Relu(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for ((a, g), v) in gx.iter_mut().zip(gout).zip(val(*x)) {
                    if *v > 0.0 {
                        *a += g;
                    }
                }
            }
        }
        Op::Gelu(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for ((a, g), v) in gx.iter_mut().zip(gout).zip(val(*x)) {
                    *a += g * gelu_grad(*v);
                }
            }
        }
        Op::Reshape(x) | Op::StraightThrough(x) => add_into(nodes, grads, *x, gout),
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = split_axis(node.value.shape(), *axis).expect("checked in forward");
            let mut offset = 0;
            for &v in inputs {
                let len = shp(v)[*axis];
                if let Some(gv) = slot(nodes, grads, v) {
                    for o in 0..outer {
                        let src = &gout[(o * total + offset) * inner..][..len * inner];
                        for (a, g) in gv[o * len * inner..][..len * inner].iter_mut().zip(src) {
                            *a += g;
                        }
                    }
                }
                offset += len;
            }
        }
        Op::Slice { x, axis, start } => {
            let (outer, n, inner) = split_axis(shp(*x), *axis).expect("checked in forward");
            let len = node.value.shape()[*axis];
            if let Some(gx) = slot(nodes, grads, *x) {
                for o in 0..outer {
                    let dst = &mut gx[(o * n + start) * inner..][..len * inner];
                    for (a, g) in dst.iter_mut().zip(&gout[o * len * inner..][..len * inner]) {
                        *a += g;
                    }
                }
            }
        }
        Op::ExpandBatch(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                let n = gx.len();
                for chunk in gout.chunks(n) {
                    gx.iter_mut().zip(chunk).for_each(|(a, g)| *a += g);
                }
            }
        }
        Op::Gather { x, index } => {
            let shape = shp(*x);
            let row = numel(&shape[2..]);
            let frames = shape[1];
            if let Some(gx) = slot(nodes, grads, *x) {
                let mut at = 0;
                for (b, idx) in index.iter().enumerate() {
                    for &t in idx {
                        let dst = &mut gx[(b * frames + t) * row..][..row];
                        dst.iter_mut().zip(&gout[at..at + row]).for_each(|(a, g)| *a += g);
                        at += row;
                    }
                }
            }
        }
        Op::RepeatInterleave { x, repeats } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for (a, chunk) in gx.iter_mut().zip(gout.chunks(*repeats)) {
                    *a += chunk.iter().sum::<f64>();
                }
            }
        }
        Op::Embedding { table, ids } => {
            let d = shp(*table)[1];
            if let Some(gt) = slot(nodes, grads, *table) {
                for (p, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += gout[p * d + j];
                    }
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
        } => {
            let k = shp(*logits)[1];
            let scale = gout[0] / targets.len() as f64;
            if let Some(gl) = slot(nodes, grads, *logits) {
                for (r, &t) in targets.iter().enumerate() {
                    for j in 0..k {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        gl[r * k + j] += scale * (probs[r * k + j] - onehot);
                    }
                }
            }
        }
        Op::Mse(a, b) => {
            let n = node_numel(nodes, *a).max(1) as f64;
            let c = 2.0 * gout[0] / n;
            let diff: Vec<f64> = val(*a).iter().zip(val(*b)).map(|(x, y)| c * (x - y)).collect();
            add_into(nodes, grads, *a, &diff);
            if let Some(gb) = slot(nodes, grads, *b) {
                gb.iter_mut().zip(&diff).for_each(|(x, d)| *x -= d);
            }
        }
    }
}

fn node_numel(nodes: &[Node], v: Var) -> usize {
    nodes[v.0].value.numel()
}
