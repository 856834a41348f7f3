//! Wengert tape: every primitive appends a node holding its output value and
//! enough context to replay the chain rule in reverse.

use std::fmt;

use super::dense::{
    broadcast_shape, broadcast_strides, for_each_broadcast, reduce_to_shape, strides, Tensor,
};
use super::kernels::{self, Conv2dGeometry, ConvTransposeGeometry};
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryKind {
    Sigmoid,
    Relu,
    Tanh,
    Exp,
    Log,
    Negate,
    Scale(f64),
    AddScalar(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    /// Parametric ReLU; the second operand holds the slopes.
    Prelu,
}

/// Backward rule for operations defined outside this module.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &str;

    /// Vector-Jacobian product: one entry per input, `None` when an input
    /// needs no gradient.
    fn backward(&self, grad: &Tensor, inputs: &[&Tensor], output: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>>;
}

/// Batch-norm operating mode.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a> {
    /// Normalise with statistics of the current input.
    Train,
    /// Normalise with stored running statistics.
    Infer { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel statistics observed in train mode (variance is unbiased).
#[derive(Clone, Debug, PartialEq)]
pub struct BnBatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub const BN_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    Unary { kind: UnaryKind, x: Var },
    Binary { kind: BinaryKind, a: Var, b: Var },
    MatMul { a: Var, b: Var },
    Permute { x: Var, perm: Vec<usize> },
    Reshape { x: Var },
    Softmax { x: Var, axis: usize },
    SumAxes { x: Var, axes: Vec<usize>, scale: f64 },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Conv2d { x: Var, w: Var, b: Option<Var>, geo: Conv2dGeometry },
    ConvTranspose { x: Var, w: Var, b: Option<Var>, geo: ConvTransposeGeometry },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

impl Op {
    fn name(&self) -> String {
        match self {
            Op::Leaf => "leaf".into(),
            Op::Unary { kind, .. } => format!("{kind:?}").to_lowercase(),
            Op::Binary { kind, .. } => format!("{kind:?}").to_lowercase(),
            Op::MatMul { .. } => "matmul".into(),
            Op::Permute { .. } => "permute".into(),
            Op::Reshape { .. } => "reshape".into(),
            Op::Softmax { .. } => "softmax".into(),
            Op::SumAxes { .. } => "sum".into(),
            Op::Concat { .. } => "concat".into(),
            Op::Slice { .. } => "slice".into(),
            Op::Conv2d { .. } => "conv2d".into(),
            Op::ConvTranspose { .. } => "conv_transpose2d".into(),
            Op::BatchNorm { .. } => "batch_norm".into(),
            Op::Custom { op, .. } => op.name().into(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive operations. Nodes are appended in execution
/// order, so the record is topologically sorted by construction.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    /// Sign patterns imposed on piecewise-linear nodes, in creation order.
    frozen: Option<(Vec<Vec<bool>>, usize)>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros when `v` did not influence the loss.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose ReLU/PReLU nodes select their linear piece from
    /// `patterns` (as returned by [`Tape::kink_pattern`]) instead of from
    /// the sign of their input. The computed function is then smooth.
    pub fn with_frozen_kinks(patterns: Vec<Vec<bool>>) -> Self {
        Self {
            nodes: Vec::new(),
            frozen: Some((patterns, 0)),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Per piecewise-linear node, whether its input is positive at each
    /// output element.
    pub fn kink_pattern(&self) -> Vec<Vec<bool>> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match node.op {
                Op::Unary { kind: UnaryKind::Relu, x } => {
                    out.push(self.nodes[x.0].value.data().iter().map(|&v| v > 0.0).collect())
                }
                Op::Binary { kind: BinaryKind::Prelu, a, b } => {
                    let shape = node.value.shape();
                    let sa = broadcast_strides(self.shape(a), shape);
                    let sb = broadcast_strides(self.shape(b), shape);
                    let ad = self.nodes[a.0].value.data();
                    let mut flags = vec![false; node.value.len()];
                    for_each_broadcast(shape, &sa, &sb, |k, ia, _| flags[k] = ad[ia] > 0.0);
                    out.push(flags);
                }
                _ => {}
            }
        }
        out
    }

    /// Next imposed pattern, if this tape is frozen and it fits `len`.
    fn next_frozen(&mut self, len: usize) -> Option<Vec<bool>> {
        let (patterns, next) = self.frozen.as_mut()?;
        let p = patterns.get(*next)?;
        *next += 1;
        (p.len() == len).then(|| p.clone())
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

    /// Name of the operation that produced `v`.
    pub fn op_name(&self, v: Var) -> String {
        self.nodes[v.0].op.name()
    }

    /// Hash of the sign pattern at every piecewise-linear node (ReLU and
    /// PReLU inputs). Two evaluations of the same graph with equal
    /// signatures lie on the same linear piece of those nodes.
    pub fn kink_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for node in &self.nodes {
            let x = match node.op {
                Op::Unary { kind: UnaryKind::Relu, x } => x,
                Op::Binary { kind: BinaryKind::Prelu, a, .. } => a,
                _ => continue,
            };
            for &v in self.nodes[x.0].value.data() {
                (v > 0.0).hash(&mut h);
            }
        }
        h.finish()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Constant leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    // ── elementwise ─────────────────────────────────────────────────────

    pub fn unary(&mut self, kind: UnaryKind, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let f: Box<dyn Fn(f64) -> f64> = match kind {
            UnaryKind::Sigmoid => Box::new(sigmoid),
            UnaryKind::Relu => Box::new(|v: f64| v.max(0.0)),
            UnaryKind::Tanh => Box::new(f64::tanh),
            UnaryKind::Exp => Box::new(f64::exp),
            UnaryKind::Log => Box::new(f64::ln),
            UnaryKind::Negate => Box::new(|v: f64| -v),
            UnaryKind::Scale(s) => Box::new(move |v| v * s),
            UnaryKind::AddScalar(s) => Box::new(move |v| v + s),
        };
        let mut out = xv.map(f);
        if kind == UnaryKind::Relu {
            if let Some(p) = self.next_frozen(out.len()) {
                let xd = self.nodes[x.0].value.data();
                for (k, o) in out.data_mut().iter_mut().enumerate() {
                    *o = if p[k] { xd[k] } else { 0.0 };
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::Unary { kind, x }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, x)
    }
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Relu, x)
    }
    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Tanh, x)
    }
    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Exp, x)
    }
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Log, x)
    }
    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Negate, x)
    }
    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(UnaryKind::Scale(s), x)
    }
    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(UnaryKind::AddScalar(s), x)
    }

    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let out_shape = broadcast_shape(av.shape(), bv.shape())?;
        let f = match kind {
            BinaryKind::Add => |x: f64, y: f64| x + y,
            BinaryKind::Sub => |x: f64, y: f64| x - y,
            BinaryKind::Mul => |x: f64, y: f64| x * y,
            BinaryKind::Prelu => |x: f64, y: f64| if x > 0.0 { x } else { y * x },
        };
        let out = if av.shape() == bv.shape() {
            let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(&out_shape, data)?
        } else {
            let sa = broadcast_strides(av.shape(), &out_shape);
            let sb = broadcast_strides(bv.shape(), &out_shape);
            let mut out = Tensor::zeros(&out_shape);
            let (ad, bd) = (av.data(), bv.data());
            let od = out.data_mut();
            for_each_broadcast(&out_shape, &sa, &sb, |k, ia, ib| od[k] = f(ad[ia], bd[ib]));
            out
        };
        let mut out = out;
        if kind == BinaryKind::Prelu {
            if let Some(p) = self.next_frozen(out.len()) {
                let (ad, bd) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                let sa = broadcast_strides(self.shape(a), &out_shape);
                let sb = broadcast_strides(self.shape(b), &out_shape);
                let od = out.data_mut();
                for_each_broadcast(&out_shape, &sa, &sb, |k, ia, ib| {
                    od[k] = if p[k] { ad[ia] } else { bd[ib] * ad[ia] }
                });
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Binary { kind, a, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }
    pub fn prelu(&mut self, x: Var, alpha: Var) -> Result<Var> {
        self.binary(BinaryKind::Prelu, x, alpha)
    }

    // ── linear algebra ──────────────────────────────────────────────────

    /// `[.., M, K] x [.., K, N]`; a 2-D right operand is shared across the
    /// batch dimensions of the left one.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let g = MatMulGeom::new(&ash, &bsh)?;
        let mut out = vec![0.0; g.batch * g.m * g.n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for bi in 0..g.batch {
            let boff = if g.shared_b { 0 } else { bi * g.k * g.n };
            kernels::gemm_acc(
                &ad[bi * g.m * g.k..][..g.m * g.k],
                &bd[boff..][..g.k * g.n],
                &mut out[bi * g.m * g.n..][..g.m * g.n],
                g.m,
                g.k,
                g.n,
                false,
                false,
            );
        }
        let mut shape = ash[..ash.len() - 2].to_vec();
        shape.extend([g.m, g.n]);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MatMul { a, b }, rg))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let nd = xv.ndim();
        let mut seen = vec![false; nd];
        if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err!("invalid permutation {:?} for rank {}", perm, nd));
        }
        let out = permute_tensor(xv, perm);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Permute { x, perm: perm.to_vec() }, rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let nd = self.value(x).ndim();
        if nd < 2 {
            return Err(shape_err!("transpose needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.permute(x, &perm)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape { x }, rg))
    }

    // ── reductions and normalisers ──────────────────────────────────────

    /// Softmax along `axis`, max-subtracted.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.masked_softmax(x, axis, None)
    }

    /// Softmax along `axis` after adding an additive mask of `0` / `-inf`
    /// entries (same shape as `x`). Fully masked slices yield zeros.
    pub fn masked_softmax(&mut self, x: Var, axis: usize, mask: Option<&[f64]>) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.ndim() {
            return Err(shape_err!("softmax axis {} out of range for {:?}", axis, xv.shape()));
        }
        if let Some(m) = mask {
            if m.len() != xv.len() {
                return Err(shape_err!("softmax mask has {} entries, input {}", m.len(), xv.len()));
            }
        }
        let shape = xv.shape().to_vec();
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = xv.data();
        let mut out = vec![0.0; src.len()];
        let mut row = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                for (k, r) in row.iter_mut().enumerate() {
                    *r = src[at(k)] + mask.map_or(0.0, |m| m[at(k)]);
                }
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    continue;
                }
                let mut total = 0.0;
                for r in row.iter_mut() {
                    *r = (*r - max).exp();
                    total += *r;
                }
                for (k, r) in row.iter().enumerate() {
                    out[at(k)] = r / total;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax { x, axis }, rg))
    }

    fn reduce_axes(&mut self, x: Var, axes: &[usize], scale: f64) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.iter().any(|&a| a >= shape.len()) {
            return Err(shape_err!("reduction axes {:?} invalid for {:?}", axes, shape));
        }
        let keep: Vec<usize> = (0..shape.len()).filter(|d| !sorted.contains(d)).collect();
        let mut out_shape: Vec<usize> = keep.iter().map(|&d| shape[d]).collect();
        let kept_strides = {
            let red: Vec<usize> = shape
                .iter()
                .enumerate()
                .map(|(d, &e)| if sorted.contains(&d) { 1 } else { e })
                .collect();
            broadcast_strides(&red, &shape)
        };
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let mut out = Tensor::zeros(&out_shape);
        let zeros = vec![0; shape.len()];
        let src = xv.data();
        let od = out.data_mut();
        for_each_broadcast(&shape, &kept_strides, &zeros, |k, io, _| od[io] += src[k]);
        for v in od.iter_mut() {
            *v *= scale;
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SumAxes { x, axes: sorted, scale }, rg))
    }

    pub fn sum_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce_axes(x, axes, 1.0)
    }

    /// Arithmetic mean over `axes`; the listed axes are removed.
    pub fn mean_pool(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x);
        let count: usize = axes.iter().filter_map(|&a| shape.get(a)).product();
        if count == 0 {
            return Err(shape_err!("mean over empty axes {:?}", axes));
        }
        self.reduce_axes(x, axes, 1.0 / count as f64)
    }

    /// Sum of every entry, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let axes: Vec<usize> = (0..self.value(x).ndim()).collect();
        self.reduce_axes(x, &axes, 1.0).expect("full reduction is always valid")
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let axes: Vec<usize> = (0..self.value(x).ndim()).collect();
        self.reduce_axes(x, &axes, 1.0 / n).expect("full reduction is always valid")
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        Ok(self.sum(p))
    }

    // ── structural ──────────────────────────────────────────────────────

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .value(*parts.first().ok_or_else(|| shape_err!("concat of nothing"))?)
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(shape_err!("concat axis {} out of range for {:?}", axis, first));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(shape_err!("concat shape mismatch {:?} vs {:?}", s, first));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let block = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * block..(o + 1) * block]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// `x[.., start..start+len, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(shape_err!(
                "slice {}..{} on axis {} out of range for {:?}",
                start,
                start + len,
                axis,
                shape
            ));
        }
        let (outer, ext, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * ext + start) * inner..(o * ext + start + len) * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&oshape, out)?, Op::Slice { x, axis, start }, rg))
    }

    // ── convolution and normalisation ───────────────────────────────────

    /// Cross-correlation of a `[C_in, T, F]` map with a `[C_out, C_in, kT, kF]`
    /// kernel and optional `[C_out]` bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geo: Conv2dGeometry) -> Result<Var> {
        let s = kernels::conv2d_shapes(self.shape(x), self.shape(w), &geo)?;
        let bias = self.checked_bias(b, s.output.c)?;
        let out = kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), bias, &s, &geo);
        let shape = [s.output.c, s.output.t, s.output.f];
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Conv2d { x, w, b, geo }, rg))
    }

    /// Transposed convolution with a `[C_in, C_out, kT, kF]` kernel, cropped
    /// per `geo`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, geo: ConvTransposeGeometry) -> Result<Var> {
        let s = kernels::conv_transpose_shapes(self.shape(x), self.shape(w), &geo)?;
        let bias = self.checked_bias(b, s.output.c)?;
        let out = kernels::conv_transpose_forward(self.value(x).data(), self.value(w).data(), bias, &s, &geo);
        let shape = [s.output.c, s.output.t, s.output.f];
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(Tensor::new(&shape, out)?, Op::ConvTranspose { x, w, b, geo }, rg))
    }

    fn checked_bias(&self, b: Option<Var>, channels: usize) -> Result<Option<&[f64]>> {
        match b {
            None => Ok(None),
            Some(b) if self.shape(b) == [channels] => Ok(Some(self.value(b).data())),
            Some(b) => Err(shape_err!("bias shape {:?}, expected [{}]", self.shape(b), channels)),
        }
    }

    /// Per-channel batch normalisation over every axis but the first.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, mode: BnMode<'_>) -> Result<(Var, Option<BnBatchStats>)> {
        let xv = self.value(x);
        let c = *xv.shape().first().ok_or_else(|| shape_err!("batch_norm on scalar"))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err!("batch_norm affine params must be [{}]", c));
        }
        let per = xv.len() / c;
        let (g, bta) = (self.value(gamma).data(), self.value(beta).data());
        let src = xv.data();
        let mut xhat = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; c];
        let mut stats = None;
        match mode {
            BnMode::Train => {
                let mut means = vec![0.0; c];
                let mut vars = vec![0.0; c];
                for ch in 0..c {
                    let block = &src[ch * per..(ch + 1) * per];
                    let mean = block.iter().sum::<f64>() / per as f64;
                    let var = block.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / per as f64;
                    means[ch] = mean;
                    vars[ch] = if per > 1 { var * per as f64 / (per - 1) as f64 } else { var };
                    inv_std[ch] = 1.0 / (var + BN_EPS).sqrt();
                }
                stats = Some(BnBatchStats { mean: means.clone(), var: vars });
                normalise(src, &means, &inv_std, g, bta, per, &mut xhat, &mut out);
            }
            BnMode::Infer { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(shape_err!("running stats must have {} channels", c));
                }
                for ch in 0..c {
                    inv_std[ch] = 1.0 / (var[ch] + BN_EPS).sqrt();
                }
                normalise(src, mean, &inv_std, g, bta, per, &mut xhat, &mut out);
            }
        }
        let shape = xv.shape().to_vec();
        let train = matches!(mode, BnMode::Train);
        let rg = self.rg(&[x, gamma, beta]);
        let v = self.push(
            Tensor::new(&shape, out)?,
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train },
            rg,
        );
        Ok((v, stats))
    }

    /// Records an operation whose value was computed externally.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        let rg = self.rg(inputs);
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        )
    }

    // ── reverse pass ────────────────────────────────────────────────────

    /// Reverse sweep from a one-element `loss`. Each recorded node is visited
    /// at most once; contributions from multiple uses are summed.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let contributions = self.vjp(node, &g)?;
            for (v, cg) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&cg),
                    slot @ None => *slot = Some(cg),
                }
            }
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn vjp(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let need = |v: Var| self.nodes[v.0].requires_grad;
        let y = &node.value;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Unary { kind, x } => {
                let xv = val(*x);
                let gd = g.data();
                let data: Vec<f64> = match kind {
                    UnaryKind::Sigmoid => zip3(gd, y.data(), |g, y| g * y * (1.0 - y)),
                    UnaryKind::Relu => zip3(gd, xv.data(), |g, x| if x > 0.0 { g } else { 0.0 }),
                    UnaryKind::Tanh => zip3(gd, y.data(), |g, y| g * (1.0 - y * y)),
                    UnaryKind::Exp => zip3(gd, y.data(), |g, y| g * y),
                    UnaryKind::Log => zip3(gd, xv.data(), |g, x| g / x),
                    UnaryKind::Negate => gd.iter().map(|g| -g).collect(),
                    UnaryKind::Scale(s) => gd.iter().map(|g| g * s).collect(),
                    UnaryKind::AddScalar(_) => gd.to_vec(),
                };
                out.push((*x, Tensor::new(xv.shape(), data)?));
            }
            Op::Binary { kind, a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let oshape = y.shape();
                let sa = broadcast_strides(av.shape(), oshape);
                let sb = broadcast_strides(bv.shape(), oshape);
                let mut ga = Tensor::zeros(oshape);
                let mut gb = Tensor::zeros(oshape);
                {
                    let (ad, bd, gd) = (av.data(), bv.data(), g.data());
                    let (gad, gbd) = (ga.data_mut(), gb.data_mut());
                    for_each_broadcast(oshape, &sa, &sb, |k, ia, ib| {
                        let (da, db) = match kind {
                            BinaryKind::Add => (gd[k], gd[k]),
                            BinaryKind::Sub => (gd[k], -gd[k]),
                            BinaryKind::Mul => (gd[k] * bd[ib], gd[k] * ad[ia]),
                            BinaryKind::Prelu => {
                                if ad[ia] > 0.0 {
                                    (gd[k], 0.0)
                                } else {
                                    (gd[k] * bd[ib], gd[k] * ad[ia])
                                }
                            }
                        };
                        gad[k] = da;
                        gbd[k] = db;
                    });
                }
                if need(*a) {
                    out.push((*a, reduce_to_shape(&ga, av.shape())));
                }
                if need(*b) {
                    out.push((*b, reduce_to_shape(&gb, bv.shape())));
                }
            }
            Op::MatMul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let gm = MatMulGeom::new(av.shape(), bv.shape())?;
                let (m, k, n) = (gm.m, gm.k, gm.n);
                if need(*a) {
                    let mut ga = vec![0.0; av.len()];
                    for bi in 0..gm.batch {
                        let boff = if gm.shared_b { 0 } else { bi * k * n };
                        // ga = g · bᵀ
                        kernels::gemm_acc(
                            &g.data()[bi * m * n..][..m * n],
                            &bv.data()[boff..][..k * n],
                            &mut ga[bi * m * k..][..m * k],
                            m,
                            n,
                            k,
                            false,
                            true,
                        );
                    }
                    out.push((*a, Tensor::new(av.shape(), ga)?));
                }
                if need(*b) {
                    let mut gb = vec![0.0; bv.len()];
                    for bi in 0..gm.batch {
                        let boff = if gm.shared_b { 0 } else { bi * k * n };
                        // gb = aᵀ · g
                        kernels::gemm_acc(
                            &av.data()[bi * m * k..][..m * k],
                            &g.data()[bi * m * n..][..m * n],
                            &mut gb[boff..][..k * n],
                            k,
                            m,
                            n,
                            true,
                            false,
                        );
                    }
                    out.push((*b, Tensor::new(bv.shape(), gb)?));
                }
            }
            Op::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                out.push((*x, permute_tensor(g, &inverse)));
            }
            Op::Reshape { x } => {
                out.push((*x, g.clone().reshape(val(*x).shape())?));
            }
            Op::Softmax { x, axis } => {
                let shape = y.shape();
                let (outer, len, inner) = split_axis(shape, *axis);
                let (yd, gd) = (y.data(), g.data());
                let mut gx = vec![0.0; yd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let s: f64 = (0..len).map(|k| yd[at(k)] * gd[at(k)]).sum();
                        for k in 0..len {
                            gx[at(k)] = yd[at(k)] * (gd[at(k)] - s);
                        }
                    }
                }
                out.push((*x, Tensor::new(shape, gx)?));
            }
            Op::SumAxes { x, axes, scale } => {
                let xshape = val(*x).shape();
                let red: Vec<usize> = xshape
                    .iter()
                    .enumerate()
                    .map(|(d, &e)| if axes.contains(&d) { 1 } else { e })
                    .collect();
                let sg = broadcast_strides(&red, xshape);
                let zeros = vec![0; xshape.len()];
                let mut gx = Tensor::zeros(xshape);
                let (gd, gxd) = (g.data(), gx.data_mut());
                for_each_broadcast(xshape, &sg, &zeros, |k, ig, _| gxd[k] = gd[ig] * scale);
                out.push((*x, gx));
            }
            Op::Concat { parts, axis } => {
                let shape = y.shape();
                let (outer, total, inner) = split_axis(shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let ext = val(p).shape()[*axis];
                    if need(p) {
                        let mut gp = Vec::with_capacity(outer * ext * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            gp.extend_from_slice(&g.data()[base..base + ext * inner]);
                        }
                        out.push((p, Tensor::new(val(p).shape(), gp)?));
                    }
                    offset += ext;
                }
            }
            Op::Slice { x, axis, start } => {
                let xshape = val(*x).shape();
                let (outer, ext, inner) = split_axis(xshape, *axis);
                let len = y.shape()[*axis];
                let mut gx = Tensor::zeros(xshape);
                let gxd = gx.data_mut();
                for o in 0..outer {
                    let dst = (o * ext + start) * inner;
                    gxd[dst..dst + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                out.push((*x, gx));
            }
            Op::Conv2d { x, w, b, geo } => {
                let (xv, wv) = (val(*x), val(*w));
                let s = kernels::conv2d_shapes(xv.shape(), wv.shape(), geo)?;
                let (gx, gw) = kernels::conv2d_backward(xv.data(), wv.data(), g.data(), &s, geo, need(*x), need(*w));
                if let Some(gx) = gx {
                    out.push((*x, Tensor::new(xv.shape(), gx)?));
                }
                if let Some(gw) = gw {
                    out.push((*w, Tensor::new(wv.shape(), gw)?));
                }
                if let Some(b) = b.filter(|b| need(*b)) {
                    out.push((b, channel_sums(g)));
                }
            }
            Op::ConvTranspose { x, w, b, geo } => {
                let (xv, wv) = (val(*x), val(*w));
                let s = kernels::conv_transpose_shapes(xv.shape(), wv.shape(), geo)?;
                let (gx, gw) =
                    kernels::conv_transpose_backward(xv.data(), wv.data(), g.data(), &s, geo, need(*x), need(*w));
                if let Some(gx) = gx {
                    out.push((*x, Tensor::new(xv.shape(), gx)?));
                }
                if let Some(gw) = gw {
                    out.push((*w, Tensor::new(wv.shape(), gw)?));
                }
                if let Some(b) = b.filter(|b| need(*b)) {
                    out.push((b, channel_sums(g)));
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let c = inv_std.len();
                let per = xhat.len() / c;
                let gam = val(*gamma).data();
                let gd = g.data();
                let mut ggamma = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                let mut gx = vec![0.0; gd.len()];
                for ch in 0..c {
                    let r = ch * per..(ch + 1) * per;
                    let (gs, xs) = (&gd[r.clone()], &xhat[r.clone()]);
                    let sum_g: f64 = gs.iter().sum();
                    let sum_gx: f64 = gs.iter().zip(xs).map(|(a, b)| a * b).sum();
                    ggamma[ch] = sum_gx;
                    gbeta[ch] = sum_g;
                    let k = gam[ch] * inv_std[ch];
                    let dst = &mut gx[r];
                    if *train {
                        let (mg, mgx) = (sum_g / per as f64, sum_gx / per as f64);
                        for ((d, &gv), &xh) in dst.iter_mut().zip(gs).zip(xs) {
                            *d = k * (gv - mg - xh * mgx);
                        }
                    } else {
                        for (d, &gv) in dst.iter_mut().zip(gs) {
                            *d = k * gv;
                        }
                    }
                }
                if need(*x) {
                    out.push((*x, Tensor::new(val(*x).shape(), gx)?));
                }
                if need(*gamma) {
                    out.push((*gamma, Tensor::from_vec(ggamma)));
                }
                if need(*beta) {
                    out.push((*beta, Tensor::from_vec(gbeta)));
                }
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|&v| need(v)).collect();
                for (v, gi) in inputs.iter().zip(op.backward(g, &ins, y, &needs)) {
                    if let Some(gi) = gi {
                        out.push((*v, gi));
                    }
                }
            }
        }
        Ok(out)
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

fn zip3(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

#[allow(clippy::too_many_arguments)]
fn normalise(
    src: &[f64],
    mean: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    beta: &[f64],
    per: usize,
    xhat: &mut [f64],
    out: &mut [f64],
) {
    for ch in 0..inv_std.len() {
        for k in ch * per..(ch + 1) * per {
            xhat[k] = (src[k] - mean[ch]) * inv_std[ch];
            out[k] = gamma[ch] * xhat[k] + beta[ch];
        }
    }
}

fn channel_sums(g: &Tensor) -> Tensor {
    let c = g.shape()[0];
    let per = g.len() / c;
    Tensor::from_vec(g.data().chunks(per).map(|ch| ch.iter().sum()).collect())
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_tensor(x: &Tensor, perm: &[usize]) -> Tensor {
    let shape = x.shape();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides = strides(shape);
    let permuted: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let zeros = vec![0; shape.len()];
    let mut out = Tensor::zeros(&out_shape);
    let (src, dst) = (x.data(), out.data_mut());
    for_each_broadcast(&out_shape, &permuted, &zeros, |k, is, _| dst[k] = src[is]);
    out
}

struct MatMulGeom {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_b: bool,
}

impl MatMulGeom {
    fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 {
            return Err(shape_err!("matmul needs rank >= 2, got {:?} x {:?}", a, b));
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
        if k != k2 {
            return Err(shape_err!("matmul inner extents differ: {:?} x {:?}", a, b));
        }
        let abatch = &a[..a.len() - 2];
        let bbatch = &b[..b.len() - 2];
        let shared_b = bbatch.is_empty();
        if !shared_b && abatch != bbatch {
            return Err(shape_err!("matmul batch extents differ: {:?} x {:?}", a, b));
        }
        Ok(Self {
            batch: abatch.iter().product(),
            m,
            k,
            n,
            shared_b,
        })
    }
}
