use super::array::gemm;
use super::{Array, GraphError};

/// Additive score applied to blocked attention pairs before the softmax.
pub const DEFAULT_MASK_FILL: f64 = -1e9;

/// Variance floor inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    TransposeLast2(Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Narrow { x: Var, axis: usize, start: usize },
    RepeatLast(Var, usize),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Sin(Var),
    Cos(Var),
    SumAxis(Var, usize),
    SumAll(Var),
    MeanAll(Var),
    MaxAxis { x: Var, argmax: Vec<usize> },
    MaxAll { x: Var, argmax: usize },
    SoftmaxMasked(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    SquaredNorm(Var),
    PairwiseSqDist(Var),
}

struct Node {
    value: Array,
    op: Op,
    trainable: bool,
    requires_grad: bool,
}

/// Record of a forward evaluation.
pub struct Graph {
    nodes: Vec<Node>,
    mask_fill: f64,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits a shape around `axis` into `(outer, len, inner)`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>, GraphError> {
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    let mismatch = || GraphError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a == b {
        Ok(a.to_vec())
    } else if nb == 1 {
        Ok(a.to_vec())
    } else if na == 1 {
        Ok(b.to_vec())
    } else if b.len() < a.len() && a.ends_with(b) {
        Ok(a.to_vec())
    } else if a.len() < b.len() && b.ends_with(a) {
        Ok(b.to_vec())
    } else {
        Err(mismatch())
    }
}

/// Sums `g` into a buffer of length `n`, folding broadcast repeats.
fn reduce_to(g: &[f64], n: usize) -> Vec<f64> {
    if g.len() == n {
        return g.to_vec();
    }
    let mut out = vec![0.0; n];
    for chunk in g.chunks(n) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            mask_fill: DEFAULT_MASK_FILL,
        }
    }

    /// Uses `fill` instead of [`DEFAULT_MASK_FILL`] for blocked softmax entries.
    pub fn with_mask_fill(fill: f64) -> Self {
        Self {
            nodes: Vec::new(),
            mask_fill: fill,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after the first `len`. Handles to dropped
    /// nodes must not be used again; earlier handles stay valid, so a prefix
    /// of constants can be reused across evaluations.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_trainable(&self, v: Var) -> bool {
        self.nodes[v.0].trainable
    }

    fn leaf(&mut self, value: Array, trainable: bool) -> Result<Var, GraphError> {
        if !value.is_finite() {
            return Err(GraphError::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            trainable,
            requires_grad: trainable,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Array) -> Result<Var, GraphError> {
        self.leaf(value, false)
    }

    pub fn trainable(&mut self, value: Array) -> Result<Var, GraphError> {
        self.leaf(value, true)
    }

    fn push(&mut self, op_name: &'static str, value: Array, op: Op, parents: &[Var]) -> Result<Var, GraphError> {
        if !value.is_finite() {
            return Err(GraphError::NonFinite { op: op_name });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            trainable: false,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, GraphError> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let shape = broadcast_shape(name, av.shape(), bv.shape())?;
        let n: usize = shape.iter().product();
        let (ad, bd) = (av.data(), bv.data());
        let (la, lb) = (ad.len(), bd.len());
        let data: Vec<f64> = if la == n && lb == n {
            ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
        } else {
            (0..n).map(|i| f(ad[i % la], bd[i % lb])).collect()
        };
        self.push(name, Array::new(shape, data)?, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var, GraphError> {
        let value = self.nodes[x.0].value.map(|v| v * s);
        self.push("scale", value, Op::Scale(x, s), &[x])
    }

    pub fn div_scalar(&mut self, x: Var, s: f64) -> Result<Var, GraphError> {
        if s == 0.0 || !s.is_finite() {
            return Err(GraphError::NonFinite { op: "div_scalar" });
        }
        self.scale(x, 1.0 / s)
    }

    /// `[..., m, k] · [k, n] -> [..., m, n]`; leading dimensions fold into `m`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.rank() < 2 || bv.rank() != 2 || av.shape()[av.rank() - 1] != bv.shape()[0] {
            return Err(GraphError::ShapeMismatch {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (k, n) = (bv.shape()[0], bv.shape()[1]);
        let m = av.len() / k;
        let mut data = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), false, &mut data, false);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        self.push("matmul", Array::new(shape, data)?, Op::MatMul(a, b), &[a, b])
    }

    /// `[B..., m, k] · [B..., k, n] -> [B..., m, n]` with identical leading dims.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (ra, rb) = (av.rank(), bv.rank());
        let ok = ra >= 2
            && ra == rb
            && av.shape()[..ra - 2] == bv.shape()[..rb - 2]
            && av.shape()[ra - 1] == bv.shape()[rb - 2];
        if !ok {
            return Err(GraphError::ShapeMismatch {
                op: "batch_matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (m, k, n) = (av.shape()[ra - 2], av.shape()[ra - 1], bv.shape()[rb - 1]);
        let batch = av.len() / (m * k).max(1);
        let mut data = vec![0.0; batch * m * n];
        for t in 0..batch {
            gemm(
                m,
                k,
                n,
                &av.data()[t * m * k..(t + 1) * m * k],
                false,
                &bv.data()[t * k * n..(t + 1) * k * n],
                false,
                &mut data[t * m * n..(t + 1) * m * n],
                false,
            );
        }
        let mut shape = av.shape().to_vec();
        shape[ra - 1] = n;
        self.push("batch_matmul", Array::new(shape, data)?, Op::BatchMatMul(a, b), &[a, b])
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var, GraphError> {
        let xv = &self.nodes[x.0].value;
        let r = xv.rank();
        if r < 2 {
            return Err(GraphError::InvalidShape {
                op: "transpose",
                shape: xv.shape().to_vec(),
                reason: "needs rank >= 2".into(),
            });
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        let (data, shape) = permute_data(xv.data(), xv.shape(), &perm);
        self.push("transpose", Array::new(shape, data)?, Op::TransposeLast2(x), &[x])
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var, GraphError> {
        let xv = &self.nodes[x.0].value;
        let mut seen = vec![false; xv.rank()];
        let valid = perm.len() == xv.rank()
            && perm.iter().all(|&p| p < seen.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(GraphError::InvalidShape {
                op: "permute",
                shape: xv.shape().to_vec(),
                reason: format!("bad permutation {perm:?}"),
            });
        }
        let (data, shape) = permute_data(xv.data(), xv.shape(), perm);
        self.push("permute", Array::new(shape, data)?, Op::Permute(x, perm.to_vec()), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, GraphError> {
        let xv = &self.nodes[x.0].value;
        if shape.iter().product::<usize>() != xv.len() {
            return Err(GraphError::ShapeMismatch {
                op: "reshape",
                lhs: xv.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = xv.clone().reshaped(shape.to_vec())?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var, GraphError> {
        let first = xs.first().ok_or(GraphError::InvalidShape {
            op: "concat",
            shape: vec![],
            reason: "no operands".into(),
        })?;
        let base = self.nodes[first.0].value.shape().to_vec();
        if axis >= base.len() {
            return Err(GraphError::InvalidShape {
                op: "concat",
                shape: base,
                reason: format!("axis {axis} out of range"),
            });
        }
        let mut total = 0;
        for v in xs {
            let s = self.nodes[v.0].value.shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (p, q))| d == axis || p == q);
            if !compatible {
                return Err(GraphError::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in xs {
                let val = &self.nodes[v.0].value;
                let w = val.shape()[axis] * inner;
                data.extend_from_slice(&val.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push("concat", Array::new(shape, data)?, Op::Concat(xs.to_vec(), axis), xs)
    }

    /// Slice `start..start + len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var, GraphError> {
        let xv = &self.nodes[x.0].value;
        if axis >= xv.rank() || start + len > xv.shape()[axis] {
            return Err(GraphError::InvalidShape {
                op: "narrow",
                shape: xv.shape().to_vec(),
                reason: format!("range {start}..{} on axis {axis}", start + len),
            });
        }
        let (outer, alen, inner) = split_axis(xv.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * alen * inner + start * inner;
            data.extend_from_slice(&xv.data()[base..base + len * inner]);
        }
        let mut shape = xv.shape().to_vec();
        shape[axis] = len;
        self.push("narrow", Array::new(shape, data)?, Op::Narrow { x, axis, start }, &[x])
    }

    /// Appends a trailing axis of size `n`, repeating each entry.
    pub fn repeat_last(&mut self, x: Var, n: usize) -> Result<Var, GraphError> {
        let xv = &self.nodes[x.0].value;
        let data: Vec<f64> = xv.data().iter().flat_map(|&v| std::iter::repeat_n(v, n)).collect();
        let mut shape = xv.shape().to_vec();
        shape.push(n);
        self.push("repeat_last", Array::new(shape, data)?, Op::RepeatLast(x, n), &[x])
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var, GraphError> {
        let value = self.nodes[x.0].value.map(f);
        self.push(name, value, op, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, GraphError> {
        self.unary("relu", x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, GraphError> {
        self.unary("exp", x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var, GraphError> {
        self.unary("log", x, f64::ln, Op::Log(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var, GraphError> {
        self.unary("sqrt", x, f64::sqrt, Op::Sqrt(x))
    }

    pub fn sin(&mut self, x: Var) -> Result<Var, GraphError> {
        self.unary("sin", x, f64::sin, Op::Sin(x))
    }

    pub fn cos(&mut self, x: Var) -> Result<Var, GraphError> {
        self.unary("cos", x, f64::cos, Op::Cos(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var, GraphError> {
        self.mul(x, x)
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var, GraphError> {
        let xv = &self.nodes[x.0].value;
        if axis >= xv.rank() {
            return Err(GraphError::InvalidShape {
                op: "sum_axis",
                shape: xv.shape().to_vec(),
                reason: format!("axis {axis} out of range"),
            });
        }
        let (outer, len, inner) = split_axis(xv.shape(), axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &xv.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        self.push("sum_axis", Array::new(shape, data)?, Op::SumAxis(x, axis), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, GraphError> {
        let s = self.nodes[x.0].value.sum();
        self.push("sum", Array::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, GraphError> {
        let xv = &self.nodes[x.0].value;
        if xv.is_empty() {
            return Err(GraphError::InvalidShape {
                op: "mean",
                shape: xv.shape().to_vec(),
                reason: "empty operand".into(),
            });
        }
        let m = xv.sum() / xv.len() as f64;
        self.push("mean", Array::scalar(m), Op::MeanAll(x), &[x])
    }

    /// Maximum along `axis`; the gradient flows to the first maximal entry.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var, GraphError> {
        let xv = &self.nodes[x.0].value;
        if axis >= xv.rank() || xv.shape()[axis] == 0 {
            return Err(GraphError::InvalidShape {
                op: "max_axis",
                shape: xv.shape().to_vec(),
                reason: format!("axis {axis} out of range or empty"),
            });
        }
        let (outer, len, inner) = split_axis(xv.shape(), axis);
        let mut data = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    let src = (o * len + l) * inner + i;
                    let dst = o * inner + i;
                    if xv.data()[src] > data[dst] {
                        data[dst] = xv.data()[src];
                        argmax[dst] = src;
                    }
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        self.push("max_axis", Array::new(shape, data)?, Op::MaxAxis { x, argmax }, &[x])
    }

    pub fn max(&mut self, x: Var) -> Result<Var, GraphError> {
        let xv = &self.nodes[x.0].value;
        let (argmax, m) = xv
            .data()
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        if xv.is_empty() {
            return Err(GraphError::InvalidShape {
                op: "max",
                shape: xv.shape().to_vec(),
                reason: "empty operand".into(),
            });
        }
        self.push("max", Array::scalar(m), Op::MaxAll { x, argmax }, &[x])
    }

    /// Softmax over the last axis with blocked entries.
    ///
    /// `blocked` covers a trailing suffix of `x` (one row, or a full
    /// `rows x cols` pattern) and repeats over the leading dimensions.
    /// Blocked scores receive the graph's additive fill before the softmax
    /// and their output weight is then forced to exactly zero.
    pub fn softmax_masked(&mut self, x: Var, blocked: &[bool]) -> Result<Var, GraphError> {
        let xv = &self.nodes[x.0].value;
        let cols = *xv.shape().last().unwrap_or(&0);
        let mlen = blocked.len().max(1);
        if cols == 0 || (!blocked.is_empty() && (mlen % cols != 0 || xv.len() % mlen != 0)) {
            return Err(GraphError::ShapeMismatch {
                op: "softmax_masked",
                lhs: xv.shape().to_vec(),
                rhs: vec![blocked.len()],
            });
        }
        if blocked.chunks(cols).any(|row| row.iter().all(|&b| b)) {
            return Err(GraphError::InvalidShape {
                op: "softmax_masked",
                shape: xv.shape().to_vec(),
                reason: "a row is entirely blocked".into(),
            });
        }
        let fill = self.mask_fill;
        let is_blocked = |i: usize| !blocked.is_empty() && blocked[i % mlen];
        let mut data = vec![0.0; xv.len()];
        for (r, (out, src)) in data.chunks_mut(cols).zip(xv.data().chunks(cols)).enumerate() {
            let base = r * cols;
            let mut mx = f64::NEG_INFINITY;
            for (j, &s) in src.iter().enumerate() {
                let s = if is_blocked(base + j) { s + fill } else { s };
                out[j] = s;
                mx = mx.max(s);
            }
            let mut total = 0.0;
            for o in out.iter_mut() {
                *o = (*o - mx).exp();
                total += *o;
            }
            for (j, o) in out.iter_mut().enumerate() {
                *o = if is_blocked(base + j) { 0.0 } else { *o / total };
            }
        }
        let value = Array::new(xv.shape().to_vec(), data)?;
        self.push("softmax_masked", value, Op::SoftmaxMasked(x), &[x])
    }

    /// Normalizes each vector along the last axis to zero mean and unit
    /// variance (biased estimator, `eps` added to the variance).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var, GraphError> {
        let xv = &self.nodes[x.0].value;
        let d = *xv.shape().last().unwrap_or(&0);
        if d == 0 || eps < 0.0 {
            return Err(GraphError::InvalidShape {
                op: "layer_norm",
                shape: xv.shape().to_vec(),
                reason: format!("empty feature axis or negative eps {eps}"),
            });
        }
        let mut data = vec![0.0; xv.len()];
        let mut inv_std = Vec::with_capacity(xv.len() / d);
        for (out, src) in data.chunks_mut(d).zip(xv.data().chunks(d)) {
            let mean = src.iter().sum::<f64>() / d as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (o, s) in out.iter_mut().zip(src) {
                *o = (s - mean) * inv;
            }
            inv_std.push(inv);
        }
        let value = Array::new(xv.shape().to_vec(), data)?;
        self.push("layer_norm", value, Op::LayerNorm { x, inv_std }, &[x])
    }

    /// Sum of squares along the last axis.
    pub fn squared_norm(&mut self, x: Var) -> Result<Var, GraphError> {
        let xv = &self.nodes[x.0].value;
        let d = *xv.shape().last().unwrap_or(&0);
        if d == 0 {
            return Err(GraphError::InvalidShape {
                op: "squared_norm",
                shape: xv.shape().to_vec(),
                reason: "empty last axis".into(),
            });
        }
        let data: Vec<f64> = xv.data().chunks(d).map(|c| c.iter().map(|v| v * v).sum()).collect();
        let mut shape = xv.shape()[..xv.rank() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        self.push("squared_norm", Array::new(shape, data)?, Op::SquaredNorm(x), &[x])
    }

    /// `[n, d] -> [n, n]` matrix of squared Euclidean distances between rows.
    pub fn pairwise_sq_dist(&mut self, x: Var) -> Result<Var, GraphError> {
        let xv = &self.nodes[x.0].value;
        if xv.rank() != 2 {
            return Err(GraphError::InvalidShape {
                op: "pairwise_sq_dist",
                shape: xv.shape().to_vec(),
                reason: "needs [points, dims]".into(),
            });
        }
        let n = xv.shape()[0];
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let d: f64 = xv.row(i).iter().zip(xv.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                data[i * n + j] = d;
                data[j * n + i] = d;
            }
        }
        self.push("pairwise_sq_dist", Array::new(vec![n, n], data)?, Op::PairwiseSqDist(x), &[x])
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients, GraphError> {
        let rv = &self.nodes[root.0].value;
        if rv.len() != 1 {
            return Err(GraphError::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Array>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut leaves: Vec<Option<Array>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(Array::full(rv.shape(), 1.0));
        }
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                if node.trainable {
                    leaves[i] = Some(g);
                }
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads: leaves })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Array>], v: Var, data: Vec<f64>) {
        let shape = self.nodes[v.0].value.shape();
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(&data) {
                    *e += d;
                }
            }
            slot => *slot = Some(Array::new(shape.to_vec(), data).expect("gradient shape")),
        }
    }

    fn val(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    fn propagate(&self, node: &Node, g: &Array, grads: &mut [Option<Array>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.wants(*a) {
                    self.accumulate(grads, *a, reduce_to(gd, self.val(*a).len()));
                }
                if self.wants(*b) {
                    let mut r = reduce_to(gd, self.val(*b).len());
                    if sign < 0.0 {
                        r.iter_mut().for_each(|v| *v = -*v);
                    }
                    self.accumulate(grads, *b, r);
                }
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let is_div = matches!(node.op, Op::Div(..));
                let (ad, bd) = (self.val(*a).data(), self.val(*b).data());
                let (la, lb) = (ad.len(), bd.len());
                if self.wants(*a) {
                    let full: Vec<f64> = if is_div {
                        (0..gd.len()).map(|i| gd[i] / bd[i % lb]).collect()
                    } else {
                        (0..gd.len()).map(|i| gd[i] * bd[i % lb]).collect()
                    };
                    self.accumulate(grads, *a, reduce_to(&full, la));
                }
                if self.wants(*b) {
                    let full: Vec<f64> = if is_div {
                        (0..gd.len())
                            .map(|i| {
                                let bv = bd[i % lb];
                                -gd[i] * ad[i % la] / (bv * bv)
                            })
                            .collect()
                    } else {
                        (0..gd.len()).map(|i| gd[i] * ad[i % la]).collect()
                    };
                    self.accumulate(grads, *b, reduce_to(&full, lb));
                }
            }
            Op::Scale(x, s) => {
                if self.wants(*x) {
                    self.accumulate(grads, *x, gd.iter().map(|v| v * s).collect());
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (k, n) = (bv.shape()[0], bv.shape()[1]);
                let m = av.len() / k;
                if self.wants(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, gd, false, bv.data(), true, &mut ga, false);
                    self.accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), true, gd, false, &mut gb, false);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::BatchMatMul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let r = av.rank();
                let (m, k, n) = (av.shape()[r - 2], av.shape()[r - 1], bv.shape()[r - 1]);
                let batch = av.len() / (m * k).max(1);
                if self.wants(*a) {
                    let mut ga = vec![0.0; av.len()];
                    for t in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            &gd[t * m * n..(t + 1) * m * n],
                            false,
                            &bv.data()[t * k * n..(t + 1) * k * n],
                            true,
                            &mut ga[t * m * k..(t + 1) * m * k],
                            false,
                        );
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; bv.len()];
                    for t in 0..batch {
                        gemm(
                            k,
                            m,
                            n,
                            &av.data()[t * m * k..(t + 1) * m * k],
                            true,
                            &gd[t * m * n..(t + 1) * m * n],
                            false,
                            &mut gb[t * k * n..(t + 1) * k * n],
                            false,
                        );
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::TransposeLast2(x) => {
                if self.wants(*x) {
                    let r = g.rank();
                    let mut perm: Vec<usize> = (0..r).collect();
                    perm.swap(r - 2, r - 1);
                    let (data, _) = permute_data(gd, g.shape(), &perm);
                    self.accumulate(grads, *x, data);
                }
            }
            Op::Permute(x, perm) => {
                if self.wants(*x) {
                    let mut inverse = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inverse[p] = i;
                    }
                    let (data, _) = permute_data(gd, g.shape(), &inverse);
                    self.accumulate(grads, *x, data);
                }
            }
            Op::Reshape(x) => {
                if self.wants(*x) {
                    self.accumulate(grads, *x, gd.to_vec());
                }
            }
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = split_axis(g.shape(), *axis);
                let mut offset = 0;
                for v in xs {
                    let w = self.val(*v).shape()[*axis];
                    if self.wants(*v) {
                        let mut part = Vec::with_capacity(outer * w * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            part.extend_from_slice(&gd[base..base + w * inner]);
                        }
                        self.accumulate(grads, *v, part);
                    }
                    offset += w;
                }
            }
            Op::Narrow { x, axis, start } => {
                if self.wants(*x) {
                    let xv = self.val(*x);
                    let (outer, alen, inner) = split_axis(xv.shape(), *axis);
                    let len = g.shape()[*axis];
                    let mut full = vec![0.0; xv.len()];
                    for o in 0..outer {
                        let dst = o * alen * inner + start * inner;
                        full[dst..dst + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                    }
                    self.accumulate(grads, *x, full);
                }
            }
            Op::RepeatLast(x, n) => {
                if self.wants(*x) {
                    self.accumulate(grads, *x, gd.chunks(*n).map(|c| c.iter().sum()).collect());
                }
            }
            Op::Relu(x) => {
                if self.wants(*x) {
                    let xd = self.val(*x).data();
                    let r = gd.iter().zip(xd).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect();
                    self.accumulate(grads, *x, r);
                }
            }
            Op::Exp(x) => {
                if self.wants(*x) {
                    let r = gd.iter().zip(node.value.data()).map(|(g, y)| g * y).collect();
                    self.accumulate(grads, *x, r);
                }
            }
            Op::Log(x) => {
                if self.wants(*x) {
                    let r = gd.iter().zip(self.val(*x).data()).map(|(g, v)| g / v).collect();
                    self.accumulate(grads, *x, r);
                }
            }
            Op::Sqrt(x) => {
                if self.wants(*x) {
                    let r = gd.iter().zip(node.value.data()).map(|(g, y)| g / (2.0 * y)).collect();
                    self.accumulate(grads, *x, r);
                }
            }
            Op::Sin(x) => {
                if self.wants(*x) {
                    let r = gd.iter().zip(self.val(*x).data()).map(|(g, v)| g * v.cos()).collect();
                    self.accumulate(grads, *x, r);
                }
            }
            Op::Cos(x) => {
                if self.wants(*x) {
                    let r = gd.iter().zip(self.val(*x).data()).map(|(g, v)| -g * v.sin()).collect();
                    self.accumulate(grads, *x, r);
                }
            }
            Op::SumAxis(x, axis) => {
                if self.wants(*x) {
                    let xv = self.val(*x);
                    let (outer, len, inner) = split_axis(xv.shape(), *axis);
                    let mut full = vec![0.0; xv.len()];
                    for o in 0..outer {
                        for l in 0..len {
                            let dst = (o * len + l) * inner;
                            full[dst..dst + inner].copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                        }
                    }
                    self.accumulate(grads, *x, full);
                }
            }
            Op::SumAll(x) => {
                if self.wants(*x) {
                    self.accumulate(grads, *x, vec![gd[0]; self.val(*x).len()]);
                }
            }
            Op::MeanAll(x) => {
                if self.wants(*x) {
                    let n = self.val(*x).len();
                    self.accumulate(grads, *x, vec![gd[0] / n as f64; n]);
                }
            }
            Op::MaxAxis { x, argmax, .. } => {
                if self.wants(*x) {
                    let mut full = vec![0.0; self.val(*x).len()];
                    for (&src, gv) in argmax.iter().zip(gd) {
                        full[src] += gv;
                    }
                    self.accumulate(grads, *x, full);
                }
            }
            Op::MaxAll { x, argmax } => {
                if self.wants(*x) {
                    let mut full = vec![0.0; self.val(*x).len()];
                    full[*argmax] = gd[0];
                    self.accumulate(grads, *x, full);
                }
            }
            Op::SoftmaxMasked(x) => {
                if self.wants(*x) {
                    let cols = *g.shape().last().unwrap();
                    let mut full = vec![0.0; gd.len()];
                    for ((out, y), gr) in full.chunks_mut(cols).zip(node.value.data().chunks(cols)).zip(gd.chunks(cols)) {
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((o, yv), gv) in out.iter_mut().zip(y).zip(gr) {
                            *o = yv * (gv - dot);
                        }
                    }
                    self.accumulate(grads, *x, full);
                }
            }
            Op::LayerNorm { x, inv_std } => {
                if self.wants(*x) {
                    let d = *g.shape().last().unwrap();
                    let inv_d = 1.0 / d as f64;
                    let mut full = vec![0.0; gd.len()];
                    for (((out, xhat), gr), inv) in full
                        .chunks_mut(d)
                        .zip(node.value.data().chunks(d))
                        .zip(gd.chunks(d))
                        .zip(inv_std)
                    {
                        let mean_g = gr.iter().sum::<f64>() * inv_d;
                        let mean_gx = gr.iter().zip(xhat).map(|(a, b)| a * b).sum::<f64>() * inv_d;
                        for ((o, xh), gv) in out.iter_mut().zip(xhat).zip(gr) {
                            *o = inv * (gv - mean_g - xh * mean_gx);
                        }
                    }
                    self.accumulate(grads, *x, full);
                }
            }
            Op::SquaredNorm(x) => {
                if self.wants(*x) {
                    let xv = self.val(*x);
                    let d = *xv.shape().last().unwrap();
                    let r = xv.data().iter().enumerate().map(|(i, v)| 2.0 * v * gd[i / d]).collect();
                    self.accumulate(grads, *x, r);
                }
            }
            Op::PairwiseSqDist(x) => {
                if self.wants(*x) {
                    let xv = self.val(*x);
                    let (n, d) = (xv.shape()[0], xv.shape()[1]);
                    let mut full = vec![0.0; n * d];
                    for i in 0..n {
                        for j in 0..n {
                            if i == j {
                                continue;
                            }
                            let w = 2.0 * (gd[i * n + j] + gd[j * n + i]);
                            for c in 0..d {
                                full[i * d + c] += w * (xv.data()[i * d + c] - xv.data()[j * d + c]);
                            }
                        }
                    }
                    self.accumulate(grads, *x, full);
                }
            }
        }
    }
}

/// Gradients of a scalar with respect to the trainable leaves of a graph.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    /// Gradient for `leaf`, or `None` when the root does not depend on it.
    pub fn get(&self, leaf: Var) -> Option<&Array> {
        self.grads.get(leaf.0).and_then(Option::as_ref)
    }

    /// Gradient for `leaf`, zero-filled when the root does not depend on it.
    pub fn wrt(&self, graph: &Graph, leaf: Var) -> Array {
        self.get(leaf)
            .cloned()
            .unwrap_or_else(|| Array::zeros(graph.shape(leaf)))
    }

    pub fn take(&mut self, leaf: Var) -> Option<Array> {
        self.grads.get_mut(leaf.0).and_then(Option::take)
    }
}
