//! Reverse-mode automatic differentiation over a dynamic tape.
//!
//! A [`Graph`] records every operation of one forward pass in execution
//! order, which is already a topological order. [`Graph::backward`] walks the
//! tape once in reverse and accumulates gradients into each node. Graphs are
//! single-threaded; several graphs may read the same [`ParamStore`] at once.

use std::collections::HashMap;

use crate::error::{dim_err, Error, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{
    broadcast_shape, broadcast_strides, for_each_broadcast, reduce_to_shape, split_axis, Tensor,
};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// A differentiable operation defined outside the graph module.
///
/// `backward` returns one gradient buffer per input, each with the input's
/// element count. Gradients for inputs that do not require them are ignored.
pub trait CustomOp {
    fn name(&self) -> &str;
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &[f64]) -> Vec<Vec<f64>>;
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Neg,
    Scale(f64),
    AddScalar(f64),
    Sigmoid,
    Silu,
    Relu,
    Abs,
    Exp,
    Ln,
    Tanh,
    Sqrt,
    Pow(f64),
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Neg => "neg",
            Unary::Scale(_) => "scale",
            Unary::AddScalar(_) => "add_scalar",
            Unary::Sigmoid => "sigmoid",
            Unary::Silu => "silu",
            Unary::Relu => "relu",
            Unary::Abs => "abs",
            Unary::Exp => "exp",
            Unary::Ln => "ln",
            Unary::Tanh => "tanh",
            Unary::Sqrt => "sqrt",
            Unary::Pow(_) => "pow",
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Neg => -x,
            Unary::Scale(c) => c * x,
            Unary::AddScalar(c) => x + c,
            Unary::Sigmoid => sigmoid(x),
            Unary::Silu => x * sigmoid(x),
            Unary::Relu => x.max(0.0),
            Unary::Abs => x.abs(),
            Unary::Exp => x.exp(),
            Unary::Ln => x.ln(),
            Unary::Tanh => x.tanh(),
            Unary::Sqrt => x.sqrt(),
            Unary::Pow(p) => x.powf(p),
        }
    }

    /// Derivative given input `x` and output `y`.
    fn deriv(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Neg => -1.0,
            Unary::Scale(c) => c,
            Unary::AddScalar(_) => 1.0,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Unary::Relu => f64::from(u8::from(x > 0.0)),
            // Subgradient 0 at the kink.
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::Exp => y,
            Unary::Ln => 1.0 / x,
            Unary::Tanh => 1.0 - y * y,
            Unary::Sqrt => 0.5 / y,
            Unary::Pow(p) => {
                if p == 0.0 {
                    0.0
                } else {
                    p * x.powf(p - 1.0)
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum Reduce {
    Sum,
    Mean,
    Max,
}

/// Geometry of a square-kernel 2-D convolution over an `H×W×C` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_extent(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    Reduce {
        kind: Reduce,
        x: Var,
        axis: usize,
        argmax: Vec<usize>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Reshape(Var),
    Transpose(Var),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    BceLogits {
        z: Var,
        targets: Vec<f64>,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// A dynamic computation tape.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    param_leaves: HashMap<ParamId, Var>,
    param_order: Vec<(ParamId, Var)>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
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

/// `c = a·b` (or `beta·c + a·b`) for row-major operands, either of which may
/// be read transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are checked above and the strides describe
    // exactly those row-major buffers.
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
            n as isize,
            1,
        );
    }
}

fn check_finite(data: &[f64], what: &str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            param_leaves: HashMap::new(),
            param_order: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        op: Op,
        what: &str,
    ) -> Result<Var> {
        check_finite(&data, what)?;
        Ok(self.push(Tensor::from_raw(shape, data), requires_grad, op))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, false, Op::Leaf)
    }

    /// A leaf that receives gradients.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, true, Op::Leaf)
    }

    /// Loads a parameter as a gradient-tracking leaf. Repeated loads of the
    /// same parameter return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_leaves.get(&id) {
            return v;
        }
        let v = self.variable(store.get(id).clone());
        self.param_leaves.insert(id, v);
        self.param_order.push((id, v));
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    // ---------------------------------------------------------------- linear

    /// Matrix product of `[m×k]` and `[k×n]` operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return dim_err(format!("matmul of [{m}×{k}] and [{k2}×{n}]"));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), false, &mut out, 0.0);
        let rg = self.rg(a) || self.rg(b);
        self.push_checked(vec![m, n], out, rg, Op::MatMul(a, b), "matmul")
    }

    /// `x·w + b` for `x:[n×i]`, `w:[i×o]`, `b:[o]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let src = self.data(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_raw(vec![c, r], out), rg, Op::Transpose(x)))
    }

    // ----------------------------------------------------------- elementwise

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shape(&sa, &sb)?;
        let numel: usize = out_shape.iter().product();
        let mut out = vec![0.0; numel];
        let (da, db) = (self.data(a), self.data(b));
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        if sa == sb {
            for ((o, &x), &y) in out.iter_mut().zip(da).zip(db) {
                *o = f(x, y);
            }
        } else {
            let st_a = broadcast_strides(&sa, &out_shape);
            let st_b = broadcast_strides(&sb, &out_shape);
            for_each_broadcast(&out_shape, &st_a, &st_b, |i, ia, ib| {
                out[i] = f(da[ia], db[ib]);
            });
        }
        let rg = self.rg(a) || self.rg(b);
        let name = format!("{kind:?}").to_lowercase();
        self.push_checked(out_shape, out, rg, Op::Binary(kind, a, b), &name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    fn unary(&mut self, kind: Unary, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out: Vec<f64> = t.data().iter().map(|&v| kind.apply(v)).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(x);
        self.push_checked(shape, out, rg, Op::Unary(kind, x), kind.name())
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Neg, x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(Unary::Scale(c), x)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(Unary::AddScalar(c), x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Silu, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Relu, x)
    }

    /// Absolute value; the backward pass uses subgradient 0 at `x = 0`.
    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Abs, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Exp, x)
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Ln, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Tanh, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sqrt, x)
    }

    pub fn pow(&mut self, x: Var, p: f64) -> Result<Var> {
        self.unary(Unary::Pow(p), x)
    }

    // ------------------------------------------------------------ reductions

    fn reduce(&mut self, kind: Reduce, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return dim_err(format!("axis {axis} out of range for shape {shape:?}"));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        if len == 0 && matches!(kind, Reduce::Mean | Reduce::Max) {
            return dim_err(format!("{kind:?} over an empty axis"));
        }
        let src = self.data(x);
        let mut out = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        match kind {
            Reduce::Sum | Reduce::Mean => {
                for o in 0..outer {
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        for i in 0..inner {
                            out[o * inner + i] += src[base + i];
                        }
                    }
                }
                if let Reduce::Mean = kind {
                    let s = 1.0 / len as f64;
                    out.iter_mut().for_each(|v| *v *= s);
                }
            }
            Reduce::Max => {
                argmax = vec![0; outer * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut best = f64::NEG_INFINITY;
                        let mut arg = 0;
                        for l in 0..len {
                            let v = src[(o * len + l) * inner + i];
                            // Strict comparison: first maximum wins.
                            if v > best {
                                best = v;
                                arg = l;
                            }
                        }
                        out[o * inner + i] = best;
                        argmax[o * inner + i] = arg;
                    }
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let rg = self.rg(x);
        let name = format!("{kind:?}").to_lowercase();
        self.push_checked(
            out_shape,
            out,
            rg,
            Op::Reduce {
                kind,
                x,
                axis,
                argmax,
            },
            &name,
        )
    }

    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(Reduce::Sum, x, axis)
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(Reduce::Mean, x, axis)
    }

    pub fn max(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(Reduce::Max, x, axis)
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let flat = self.reshape(x, &[n])?;
        self.sum(flat, 0)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let flat = self.reshape(x, &[n])?;
        self.mean(flat, 0)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return dim_err(format!("axis {axis} out of range for shape {shape:?}"));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let m = (0..len).map(|l| src[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for l in 0..len {
                    let e = (src[at(l)] - m).exp();
                    out[at(l)] = e;
                    z += e;
                }
                for l in 0..len {
                    out[at(l)] /= z;
                }
            }
        }
        let rg = self.rg(x);
        self.push_checked(shape, out, rg, Op::Softmax { x, axis }, "softmax")
    }

    // ----------------------------------------------------------------- shape

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, rg, Op::Reshape(x)))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return dim_err(format!(
                "narrow({axis}, {start}, {len}) out of range for {shape:?}"
            ));
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_raw(out_shape, out),
            rg,
            Op::Narrow { x, axis, start },
        ))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = match xs.first() {
            Some(&v) => self.shape(v).to_vec(),
            None => return dim_err("concat of zero tensors"),
        };
        if axis >= first.len() {
            return dim_err(format!("axis {axis} out of range for shape {first:?}"));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let ok = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return dim_err(format!("concat of {first:?} and {s:?} along {axis}"));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis];
                let d = self.data(v);
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut out_shape = first;
        out_shape[axis] = total;
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::from_raw(out_shape, out),
            rg,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
        ))
    }

    /// Rows `idx` of a matrix, in the given order (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return dim_err(format!("row {bad} out of range for {r} rows"));
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_raw(vec![idx.len(), c], out),
            rg,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
        ))
    }

    // ------------------------------------------------------------- fused ops

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::Dimension("layer_norm of scalar".into()))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return dim_err(format!("layer_norm affine params must have shape [{d}]"));
        }
        let src = self.data(x);
        let (g, b) = (self.data(gamma), self.data(beta));
        let rows = src.len() / d.max(1);
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mu) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push_checked(
            shape,
            out,
            rg,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            "layer_norm",
        )
    }

    /// Convolution of an `H×W×Cin` image with `w:[k·k·Cin × Cout]` (rows
    /// ordered by kernel row, kernel column, input channel) plus bias
    /// `b:[Cout]`, producing `Ho×Wo×Cout`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Result<Var> {
        let (h, wd, cin) = match self.shape(x) {
            &[h, w, c] => (h, w, c),
            s => return dim_err(format!("conv2d input must be H×W×C, got {s:?}")),
        };
        let kk = geom.kernel * geom.kernel * cin;
        let (wr, cout) = self.value(w).dims2()?;
        if wr != kk || self.shape(b) != [cout] {
            return dim_err(format!(
                "conv2d weight must be [{kk}×Cout] with bias [Cout], got [{wr}×{cout}]"
            ));
        }
        if h + 2 * geom.pad < geom.kernel || wd + 2 * geom.pad < geom.kernel {
            return dim_err("conv2d input smaller than kernel");
        }
        let (ho, wo) = (geom.out_extent(h), geom.out_extent(wd));
        let cols = im2col(self.data(x), h, wd, cin, geom, ho, wo);
        let mut out = vec![0.0; ho * wo * cout];
        let bias = self.data(b);
        for row in out.chunks_exact_mut(cout) {
            row.copy_from_slice(bias);
        }
        gemm(ho * wo, kk, cout, &cols, false, self.data(w), false, &mut out, 1.0);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push_checked(
            vec![ho, wo, cout],
            out,
            rg,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
            "conv2d",
        )
    }

    /// Elementwise binary cross-entropy of `sigmoid(z)` against `targets`.
    pub fn bce_with_logits(&mut self, z: Var, targets: &[f64]) -> Result<Var> {
        let zs = self.data(z);
        if zs.len() != targets.len() {
            return dim_err(format!(
                "bce over {} logits with {} targets",
                zs.len(),
                targets.len()
            ));
        }
        let out: Vec<f64> = zs
            .iter()
            .zip(targets)
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .collect();
        let shape = self.shape(z).to_vec();
        let rg = self.rg(z);
        self.push_checked(
            shape,
            out,
            rg,
            Op::BceLogits {
                z,
                targets: targets.to_vec(),
            },
            "bce_with_logits",
        )
    }

    /// Records an externally defined operation.
    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = op.forward(&vals)?;
        check_finite(out.data(), op.name())?;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            out,
            rg,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
        ))
    }

    // -------------------------------------------------------------- backward

    /// Back-propagates from a one-element `loss`. Every gradient-tracking
    /// leaf ends up with a populated gradient (zeros when unreachable).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return dim_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        check_finite(self.data(loss), "loss")?;
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backward_node(i, &g);
            self.grads[i] = Some(g);
        }
        for i in 0..self.nodes.len() {
            let n = &self.nodes[i];
            if n.requires_grad && matches!(n.op, Op::Leaf) && self.grads[i].is_none() {
                self.grads[i] = Some(vec![0.0; n.value.numel()]);
            }
        }
        Ok(())
    }

    /// Gradient of the last `backward` call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradients of every parameter loaded into this graph.
    pub fn accumulate_param_grads(&self, into: &mut Gradients) {
        for &(id, v) in &self.param_order {
            if let Some(g) = self.grad(v) {
                into.accumulate(id, g);
            }
        }
    }

    pub fn param_vars(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.param_order.iter().copied()
    }

    fn acc(&mut self, v: Var, g: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        debug_assert_eq!(g.len(), self.nodes[v.0].value.numel());
        match &mut self.grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.iter_mut().zip(&g) {
                    *e += x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&mut self, i: usize, g: &[f64]) {
        // Temporarily take the op so the node's inputs can be borrowed.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = self.value(a).dims2().expect("checked in forward");
                let n = self.value(b).dims2().expect("checked in forward").1;
                if self.rg(a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g, false, self.data(b), true, &mut ga, 0.0);
                    self.acc(a, ga);
                }
                if self.rg(b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, self.data(a), true, g, false, &mut gb, 0.0);
                    self.acc(b, gb);
                }
            }
            &Op::Binary(kind, a, b) => self.backward_binary(i, kind, a, b, g),
            &Op::Unary(kind, x) => {
                let xs = self.data(x);
                let ys = self.nodes[i].value.data();
                let gx = xs
                    .iter()
                    .zip(ys)
                    .zip(g)
                    .map(|((&x, &y), &g)| g * kind.deriv(x, y))
                    .collect();
                self.acc(x, gx);
            }
            Op::Reduce {
                kind,
                x,
                axis,
                argmax,
            } => {
                let (x, axis) = (*x, *axis);
                let shape = self.shape(x).to_vec();
                let (outer, len, inner) = split_axis(&shape, axis);
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for ii in 0..inner {
                        let go = g[o * inner + ii];
                        match kind {
                            Reduce::Sum => {
                                for l in 0..len {
                                    gx[(o * len + l) * inner + ii] = go;
                                }
                            }
                            Reduce::Mean => {
                                for l in 0..len {
                                    gx[(o * len + l) * inner + ii] = go / len as f64;
                                }
                            }
                            Reduce::Max => {
                                let l = argmax[o * inner + ii];
                                gx[(o * len + l) * inner + ii] = go;
                            }
                        }
                    }
                }
                self.acc(x, gx);
            }
            &Op::Softmax { x, axis } => {
                let y = self.nodes[i].value.data();
                let (outer, len, inner) = split_axis(self.shape(x), axis);
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + ii;
                        let dot: f64 = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                        for l in 0..len {
                            gx[at(l)] = y[at(l)] * (g[at(l)] - dot);
                        }
                    }
                }
                self.acc(x, gx);
            }
            &Op::Reshape(x) => self.acc(x, g.to_vec()),
            &Op::Transpose(x) => {
                let (r, c) = self.value(x).dims2().expect("checked in forward");
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] = g[j * r + i];
                    }
                }
                self.acc(x, gx);
            }
            &Op::Narrow { x, axis, start } => {
                let shape = self.shape(x).to_vec();
                let len = self.nodes[i].value.shape()[axis];
                let (outer, full, inner) = split_axis(&shape, axis);
                let mut gx = vec![0.0; outer * full * inner];
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    let src = o * len * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                self.acc(x, gx);
            }
            Op::Concat { xs, axis } => {
                let axis = *axis;
                let out_shape = self.nodes[i].value.shape().to_vec();
                let (outer, total, inner) = split_axis(&out_shape, axis);
                let mut offset = 0;
                for &v in xs {
                    let len = self.shape(v)[axis];
                    if self.rg(v) {
                        let mut gv = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let s = (o * total + offset) * inner;
                            gv.extend_from_slice(&g[s..s + len * inner]);
                        }
                        self.acc(v, gv);
                    }
                    offset += len;
                }
            }
            Op::GatherRows { x, idx } => {
                let x = *x;
                let (r, c) = self.value(x).dims2().expect("checked in forward");
                let mut gx = vec![0.0; r * c];
                for (k, &row) in idx.iter().enumerate() {
                    for j in 0..c {
                        gx[row * c + j] += g[k * c + j];
                    }
                }
                self.acc(x, gx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let d = self.shape(gamma)[0];
                let gam = self.data(gamma);
                let rows = inv_std.len();
                let mut gx = vec![0.0; rows * d];
                let mut gg = vec![0.0; d];
                let mut gb = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let (mut s1, mut s2) = (0.0, 0.0);
                    for j in 0..d {
                        gb[j] += gr[j];
                        gg[j] += gr[j] * hr[j];
                        dxhat[j] = gr[j] * gam[j];
                        s1 += dxhat[j];
                        s2 += dxhat[j] * hr[j];
                    }
                    let k = inv_std[r] / d as f64;
                    for j in 0..d {
                        gx[r * d + j] = k * (d as f64 * dxhat[j] - s1 - hr[j] * s2);
                    }
                }
                self.acc(x, gx);
                self.acc(gamma, gg);
                self.acc(beta, gb);
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let (x, w, b, geom) = (*x, *w, *b, *geom);
                let (h, wd, cin) = match *self.shape(x) {
                    [h, w, c] => (h, w, c),
                    _ => unreachable!("checked in forward"),
                };
                let kk = geom.kernel * geom.kernel * cin;
                let cout = self.shape(b)[0];
                let (ho, wo) = (geom.out_extent(h), geom.out_extent(wd));
                let p = ho * wo;
                if self.rg(b) {
                    let mut gb = vec![0.0; cout];
                    for row in g.chunks_exact(cout) {
                        for (a, v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    self.acc(b, gb);
                }
                if self.rg(w) {
                    let mut gw = vec![0.0; kk * cout];
                    gemm(kk, p, cout, cols, true, g, false, &mut gw, 0.0);
                    self.acc(w, gw);
                }
                if self.rg(x) {
                    let mut gcols = vec![0.0; p * kk];
                    gemm(p, cout, kk, g, false, self.data(w), true, &mut gcols, 0.0);
                    let gx = col2im(&gcols, h, wd, cin, geom, ho, wo);
                    self.acc(x, gx);
                }
            }
            Op::BceLogits { z, targets } => {
                let z = *z;
                let gz = self
                    .data(z)
                    .iter()
                    .zip(targets)
                    .zip(g)
                    .map(|((&z, &t), &g)| g * (sigmoid(z) - t))
                    .collect();
                self.acc(z, gz);
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let grads = op.backward(&vals, &self.nodes[i].value, g);
                for (&v, gv) in inputs.iter().zip(grads) {
                    self.acc(v, gv);
                }
            }
        }
        self.nodes[i].op = op;
    }

    fn backward_binary(&mut self, i: usize, kind: Binary, a: Var, b: Var, g: &[f64]) {
        let out_shape = self.nodes[i].value.shape().to_vec();
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (da, db) = (self.data(a), self.data(b));
        let st_a = broadcast_strides(&sa, &out_shape);
        let st_b = broadcast_strides(&sb, &out_shape);
        let need_a = self.rg(a);
        let need_b = self.rg(b);
        let (ga, gb) = match kind {
            Binary::Add | Binary::Sub => {
                let ga = need_a.then(|| reduce_to_shape(g, &out_shape, &sa));
                let gb = need_b.then(|| {
                    let mut r = reduce_to_shape(g, &out_shape, &sb);
                    if let Binary::Sub = kind {
                        r.iter_mut().for_each(|v| *v = -*v);
                    }
                    r
                });
                (ga, gb)
            }
            Binary::Mul | Binary::Div => {
                let mut ga = need_a.then(|| vec![0.0; da.len()]);
                let mut gb = need_b.then(|| vec![0.0; db.len()]);
                for_each_broadcast(&out_shape, &st_a, &st_b, |k, ia, ib| {
                    let (x, y) = (da[ia], db[ib]);
                    match kind {
                        Binary::Mul => {
                            if let Some(ga) = ga.as_mut() {
                                ga[ia] += g[k] * y;
                            }
                            if let Some(gb) = gb.as_mut() {
                                gb[ib] += g[k] * x;
                            }
                        }
                        _ => {
                            if let Some(ga) = ga.as_mut() {
                                ga[ia] += g[k] / y;
                            }
                            if let Some(gb) = gb.as_mut() {
                                gb[ib] -= g[k] * x / (y * y);
                            }
                        }
                    }
                });
                (ga, gb)
            }
        };
        if let Some(ga) = ga {
            self.acc(a, ga);
        }
        if let Some(gb) = gb {
            self.acc(b, gb);
        }
    }
}

fn im2col(
    src: &[f64],
    h: usize,
    w: usize,
    c: usize,
    geom: ConvGeom,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let k = geom.kernel;
    let kk = k * k * c;
    let mut cols = vec![0.0; ho * wo * kk];
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &mut cols[(oy * wo + ox) * kk..(oy * wo + ox + 1) * kk];
            for ky in 0..k {
                let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let s = (iy as usize * w + ix as usize) * c;
                    let d = (ky * k + kx) * c;
                    row[d..d + c].copy_from_slice(&src[s..s + c]);
                }
            }
        }
    }
    cols
}

fn col2im(
    cols: &[f64],
    h: usize,
    w: usize,
    c: usize,
    geom: ConvGeom,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let k = geom.kernel;
    let kk = k * k * c;
    let mut out = vec![0.0; h * w * c];
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &cols[(oy * wo + ox) * kk..(oy * wo + ox + 1) * kk];
            for ky in 0..k {
                let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let d = (iy as usize * w + ix as usize) * c;
                    let s = (ky * k + kx) * c;
                    for j in 0..c {
                        out[d + j] += row[s + j];
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_cases() {
        let mut g = Graph::new();
        let a = g.constant(mat(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let b = g.constant(mat(&[vec![5.0, 6.0], vec![7.0, 8.0]]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.data(c), &[19.0, 22.0, 43.0, 50.0]);

        let i = g.constant(Tensor::eye(2));
        let c = g.matmul(i, b).unwrap();
        assert_eq!(g.data(c), g.data(b));

        let z = g.constant(Tensor::zeros(&[3, 4]));
        let r = g.constant(Tensor::full(&[4, 2], 1.5));
        let c = g.matmul(z, r).unwrap();
        assert_eq!(g.shape(c), &[3, 2]);
        assert!(g.data(c).iter().all(|&v| v == 0.0));

        assert!(matches!(g.matmul(a, z), Err(Error::Dimension(_))));
    }

    #[test]
    fn elementwise_cases() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let y = g.constant(Tensor::vector(vec![3.0, 4.0]).unwrap());
        let s = g.add(x, y).unwrap();
        assert_eq!(g.data(s), &[4.0, 6.0]);

        let zero = g.constant(Tensor::scalar(0.0).unwrap());
        let s = g.sigmoid(zero).unwrap();
        assert_eq!(g.data(s), &[0.5]);

        let m3 = g.variable(Tensor::scalar(-3.0).unwrap());
        let a = g.abs(m3).unwrap();
        assert_eq!(g.data(a), &[3.0]);
        g.backward(a).unwrap();
        assert_eq!(g.grad(m3).unwrap(), &[-1.0]);

        let three = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap());
        assert!(g.add(x, three).is_err());
    }

    #[test]
    fn abs_subgradient_at_zero() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(0.0).unwrap());
        let a = g.abs(x).unwrap();
        g.backward(a).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0]);
    }

    #[test]
    fn reduce_cases() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap());
        let s = g.sum(x, 0).unwrap();
        assert_eq!(g.data(s), &[6.0]);

        let c = g.constant(Tensor::full(&[3, 4], 2.5));
        let m = g.mean(c, 1).unwrap();
        assert!(g.data(m).iter().all(|&v| v == 2.5));

        let v = g.variable(Tensor::vector(vec![-1.0, 5.0, 2.0]).unwrap());
        let mx = g.max(v, 0).unwrap();
        assert_eq!(g.data(mx), &[5.0]);
        g.backward(mx).unwrap();
        assert_eq!(g.grad(v).unwrap(), &[0.0, 1.0, 0.0]);

        assert!(g.sum(x, 1).is_err());
    }

    #[test]
    fn softmax_cases() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0; 3]).unwrap());
        let s = g.softmax(x, 0).unwrap();
        for &v in g.data(s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.constant(Tensor::vector(vec![1000.0, 0.0]).unwrap());
        let s = g.softmax(x, 0).unwrap();
        assert!((g.data(s)[0] - 1.0).abs() < 1e-15 && g.data(s)[1] < 1e-300);
        let x = g.constant(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let s = g.softmax(x, 0).unwrap();
        // 1/(1+e), e/(1+e)
        let e = std::f64::consts::E;
        assert!((g.data(s)[0] - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((g.data(s)[0] - 0.268_941_421_369_995_1).abs() < 1e-15);
        assert!((g.data(s)[1] - 0.731_058_578_630_004_9).abs() < 1e-15);
    }

    #[test]
    fn shared_subexpression_accumulates() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(1.7).unwrap());
        let y = g.add(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0]);
    }

    #[test]
    fn unreachable_leaf_gets_zero_grad() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let unused = g.variable(Tensor::vector(vec![3.0]).unwrap());
        let s = g.sum_all(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(unused).unwrap(), &[0.0]);
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0]).unwrap());
        assert!(matches!(g.ln(x), Err(Error::NonFinite(_))));
        let big = g.constant(Tensor::vector(vec![1e300]).unwrap());
        assert!(matches!(g.mul(big, big), Err(Error::NonFinite(_))));
    }

    #[test]
    fn conv_matches_direct_loop() {
        let (h, w, cin, cout) = (5, 4, 2, 3);
        let xs: Vec<f64> = (0..h * w * cin).map(|i| (i as f64 * 0.37).sin()).collect();
        let ws: Vec<f64> = (0..9 * cin * cout).map(|i| (i as f64 * 0.11).cos()).collect();
        let bs = vec![0.1, -0.2, 0.3];
        let geom = ConvGeom {
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[h, w, cin], xs.clone()).unwrap());
        let wv = g.constant(Tensor::new(&[9 * cin, cout], ws.clone()).unwrap());
        let b = g.constant(Tensor::vector(bs.clone()).unwrap());
        let y = g.conv2d(x, wv, b, geom).unwrap();
        let (ho, wo) = (3, 2);
        assert_eq!(g.shape(y), &[ho, wo, cout]);
        for oy in 0..ho {
            for ox in 0..wo {
                for co in 0..cout {
                    let mut acc = bs[co];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (oy * 2 + ky) as isize - 1;
                            let ix = (ox * 2 + kx) as isize - 1;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                acc += xs[(iy as usize * w + ix as usize) * cin + ci]
                                    * ws[((ky * 3 + kx) * cin + ci) * cout + co];
                            }
                        }
                    }
                    let got = g.data(y)[(oy * wo + ox) * cout + co];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn forward_is_bit_identical() {
        let run = || {
            let mut g = Graph::new();
            let x = g.constant(Tensor::new(&[3, 4], (0..12).map(|i| i as f64 * 0.3).collect()).unwrap());
            let w = g.constant(Tensor::new(&[4, 2], (0..8).map(|i| (i as f64).sin()).collect()).unwrap());
            let y = g.matmul(x, w).unwrap();
            let s = g.softmax(y, 1).unwrap();
            g.data(s).to_vec()
        };
        assert_eq!(run(), run());
    }
}
