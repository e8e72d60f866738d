//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only arena of nodes. Every op pushes its result
//! after its inputs, so node order is a topological order and backward is a
//! single reverse sweep. Ops whose inputs are all constants are recorded as
//! plain constants and carry no backward state.

use std::str::FromStr;

use super::kernels::{self, ConvGeom, TConvGeom};
use super::tensor::{numel_of, Real, Tensor};
use crate::error::{config_err, dim_err, Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Gelu,
    Relu,
    Sigmoid,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Gelu => "gelu",
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
        }
    }

    pub fn apply<F: Real>(self, x: F) -> F {
        match self {
            Activation::Gelu => kernels::gelu(x),
            Activation::Relu => x.max(F::zero()),
            Activation::Sigmoid => kernels::sigmoid(x),
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "gelu" => Ok(Activation::Gelu),
            "relu" => Ok(Activation::Relu),
            "sigmoid" => Ok(Activation::Sigmoid),
            other => config_err(format!("unknown activation `{other}` (expected gelu, relu or sigmoid)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Output extent `ceil(in / stride)`, padding split evenly with the
    /// extra row/column (if any) at the bottom/right.
    Same,
    Explicit(usize),
}

/// Convolution hyperparameters. `groups == in_channels` is a depthwise
/// convolution; a 1×1 kernel with one group is a pointwise convolution.
/// Convolution is cross-correlation (the kernel is not flipped).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: Padding,
    pub groups: usize,
}

impl ConvSpec {
    /// Square kernel, stride 1, "same" padding, one group.
    pub fn same(kernel: usize) -> Self {
        ConvSpec { kernel_h: kernel, kernel_w: kernel, stride: 1, padding: Padding::Same, groups: 1 }
    }

    pub fn pointwise() -> Self {
        Self::same(1)
    }

    pub fn depthwise(kernel: usize, channels: usize) -> Self {
        ConvSpec { groups: channels, ..Self::same(kernel) }
    }

    pub fn with_stride(self, stride: usize) -> Self {
        ConvSpec { stride, ..self }
    }

    pub fn with_padding(self, padding: Padding) -> Self {
        ConvSpec { padding, ..self }
    }

    fn out_extent(&self, extent: usize, kernel: usize) -> Result<(usize, usize)> {
        match self.padding {
            Padding::Same => {
                let out = extent.div_ceil(self.stride);
                let total = ((out - 1) * self.stride + kernel).saturating_sub(extent);
                Ok((out, total / 2))
            }
            Padding::Explicit(p) => {
                if extent + 2 * p < kernel {
                    return dim_err(format!(
                        "conv2d output size is non-positive: extent {extent}, padding {p}, kernel {kernel}"
                    ));
                }
                Ok(((extent + 2 * p - kernel) / self.stride + 1, p))
            }
        }
    }

    pub(crate) fn geometry(&self, x: &[usize], w: &[usize]) -> Result<ConvGeom> {
        if self.kernel_h == 0 || self.kernel_w == 0 || self.stride == 0 || self.groups == 0 {
            return config_err(format!("conv spec fields must be positive: {self:?}"));
        }
        if x.len() != 4 || w.len() != 4 {
            return dim_err(format!("conv2d expects x[N,H,W,C] and w[kh,kw,Cin/g,Cout], got {x:?} and {w:?}"));
        }
        let (n, h, wd, cin) = (x[0], x[1], x[2], x[3]);
        let (kh, kw, cin_g, cout) = (w[0], w[1], w[2], w[3]);
        if kh != self.kernel_h || kw != self.kernel_w {
            return dim_err(format!("weight kernel {kh}×{kw} does not match spec {}×{}", self.kernel_h, self.kernel_w));
        }
        if cin % self.groups != 0 || cout % self.groups != 0 {
            return dim_err(format!("groups {} must divide in {cin} and out {cout} channels", self.groups));
        }
        if cin / self.groups != cin_g {
            return dim_err(format!(
                "weight {w:?} expects {cin_g} channels per group, input {x:?} gives {}",
                cin / self.groups
            ));
        }
        let (ho, pad_top) = self.out_extent(h, kh)?;
        let (wo, pad_left) = self.out_extent(wd, kw)?;
        Ok(ConvGeom { n, h, w: wd, cin, ho, wo, cout, kh, kw, stride: self.stride, pad_top, pad_left, groups: self.groups })
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    TConv2d { x: Var, w: Var, b: Option<Var>, geom: TConvGeom },
    Upsample { x: Var, scale: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<F>, rstd: Vec<F> },
    Softmax(Var),
    Act(Var, Activation),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddBias(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    SumAll(Var),
    SumLast(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>),
}

impl<F> Op<F> {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::BatchMatMul(..) => "batch_matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::TConv2d { .. } => "transpose_conv2d",
            Op::Upsample { .. } => "upsample_nearest",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax(_) => "softmax",
            Op::Act(..) => "activation",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddBias(..) => "add_bias",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::SumAll(_) => "sum",
            Op::SumLast(_) => "sum_last",
            Op::Reshape(_) => "reshape",
            Op::Permute(..) => "permute",
            Op::Concat(_) => "concat",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::BatchMatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::AddBias(a, b) => vec![*a, *b],
            Op::Conv2d { x, w, b, .. } | Op::TConv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Upsample { x, .. }
            | Op::Softmax(x)
            | Op::Act(x, _)
            | Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::SumAll(x)
            | Op::SumLast(x)
            | Op::Reshape(x)
            | Op::Permute(x, _) => vec![*x],
            Op::Concat(parts) => parts.clone(),
        }
    }
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
    shapes: Vec<Vec<usize>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient for `v`, or `None` if the root does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, zero-filled when the root does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor<F> {
        match self.get(v) {
            Some(t) => t.clone(),
            None => Tensor::from_parts(self.shapes[v.0].clone(), vec![F::zero(); numel_of(&self.shapes[v.0])]),
        }
    }
}

/// Arena of recorded operations. Confined to one thread from forward
/// through backward.
#[derive(Debug, Default)]
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf the backward pass does not differentiate with respect to.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.leaf(t, false)
    }

    /// A trainable leaf.
    pub fn param(&mut self, t: Tensor<F>) -> Var {
        self.leaf(t, true)
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn data(&self, v: Var) -> &[F] {
        self.nodes[v.0].value.data()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Result<Var> {
        let kind = op.kind();
        if !value.is_finite() {
            return Err(Error::NonFinite { op: kind });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return dim_err(format!("{op}: shape mismatch {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    /// `a[M×K] · b[K×N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return dim_err(format!("matmul: cannot multiply {sa:?} by {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(self.data(a), self.data(b), m, k, n);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b))
    }

    /// `a[B×M×K] · b[B×K×N]`, one product per batch entry.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return dim_err(format!("batch_matmul: cannot multiply {sa:?} by {sb:?}"));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let (da, db) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(bs * m * n);
        for i in 0..bs {
            out.extend(kernels::matmul(&da[i * m * k..(i + 1) * m * k], &db[i * k * n..(i + 1) * k * n], m, k, n));
        }
        self.push(Tensor::from_parts(vec![bs, m, n], out), Op::BatchMatMul(a, b))
    }

    /// Cross-correlation of `x[N,H,W,Cin]` with `w[kh,kw,Cin/groups,Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        let geom = spec.geometry(self.shape(x), self.shape(w))?;
        if let Some(b) = b {
            if self.shape(b) != [geom.cout] {
                return dim_err(format!("conv2d: bias {:?} does not match {} output channels", self.shape(b), geom.cout));
            }
        }
        let out = kernels::conv2d_forward(self.data(x), self.data(w), b.map(|b| self.data(b)), &geom);
        let shape = vec![geom.n, geom.ho, geom.wo, geom.cout];
        self.push(Tensor::from_parts(shape, out), Op::Conv2d { x, w, b, geom })
    }

    /// Transposed convolution with `w[stride,stride,Cin,Cout]`; the output
    /// is exactly `stride` times larger in both spatial extents.
    pub fn transpose_conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        if !matches!(stride, 2 | 4) {
            return config_err(format!("transpose_conv2d: unsupported stride {stride} (expected 2 or 4)"));
        }
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 4 || sw[0] != stride || sw[1] != stride || sw[2] != sx[3] {
            return dim_err(format!(
                "transpose_conv2d: expected x[N,H,W,C] and w[{stride},{stride},C,Cout], got {sx:?} and {sw:?}"
            ));
        }
        let geom = TConvGeom { n: sx[0], h: sx[1], w: sx[2], cin: sx[3], cout: sw[3], stride };
        if let Some(b) = b {
            if self.shape(b) != [geom.cout] {
                return dim_err(format!("transpose_conv2d: bias {:?} does not match {} channels", self.shape(b), geom.cout));
            }
        }
        let out = kernels::tconv_forward(self.data(x), self.data(w), b.map(|b| self.data(b)), &geom);
        let shape = vec![geom.n, geom.h * stride, geom.w * stride, geom.cout];
        self.push(Tensor::from_parts(shape, out), Op::TConv2d { x, w, b, geom })
    }

    pub fn upsample_nearest(&mut self, x: Var, scale: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return dim_err(format!("upsample_nearest expects [N,H,W,C], got {s:?}"));
        }
        if scale == 0 {
            return config_err("upsample_nearest: scale must be at least 1");
        }
        let out = kernels::upsample_nearest(self.data(x), s[0], s[1], s[2], s[3], scale);
        self.push(Tensor::from_parts(vec![s[0], s[1] * scale, s[2] * scale, s[3]], out), Op::Upsample { x, scale })
    }

    /// Normalizes over the last axis: `(x − μ)/sqrt(σ² + eps)·gamma + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let c = *self.shape(x).last().expect("rank >= 1");
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return dim_err(format!(
                "layer_norm: gamma {:?} / beta {:?} must be [{c}]",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        if eps <= 0.0 {
            return config_err("layer_norm: eps must be positive");
        }
        let eps = F::lit(eps);
        let inv_c = F::one() / F::lit(c as f64);
        let (xd, g, bt) = (self.data(x), self.data(gamma), self.data(beta));
        let rows = xd.len() / c;
        let mut out = vec![F::zero(); xd.len()];
        let mut xhat = vec![F::zero(); xd.len()];
        let mut rstd = vec![F::zero(); rows];
        for r in 0..rows {
            let row = &xd[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<F>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_c;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let xh = (row[j] - mean) * rs;
                xhat[r * c + j] = xh;
                out[r * c + j] = xh * g[j] + bt[j];
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(Tensor::from_parts(shape, out), Op::LayerNorm { x, gamma, beta, xhat, rstd })
    }

    /// Softmax over the last axis, computed after subtracting the row max.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let l = *self.shape(x).last().expect("rank >= 1");
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(l) {
            let m = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut total = F::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v = *v / total;
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Softmax(x))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let out = self.value(x).map(|v| kind.apply(v));
        self.push(out, Op::Act(x, kind))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Gelu)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<F>, f: impl Fn(F, F) -> F) -> Result<Var> {
        self.same_shape(op.kind(), a, b)?;
        let out: Vec<F> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::from_parts(shape, out), op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Div(a, b), |x, y| x / y)
    }

    /// `x[…×C] + b[C]`, broadcasting the bias over leading axes.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = *self.shape(x).last().expect("rank >= 1");
        if self.shape(b) != [c] {
            return dim_err(format!("add_bias: bias {:?} does not match channel count {c}", self.shape(b)));
        }
        let mut out = self.data(x).to_vec();
        kernels::add_bias_inplace(&mut out, self.data(b));
        let shape = self.shape(x).to_vec();
        self.push(Tensor::from_parts(shape, out), Op::AddBias(x, b))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let f = F::lit(factor);
        let out = self.value(x).map(|v| v * f);
        self.push(out, Op::Scale(x, f))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = F::lit(c);
        let out = self.value(x).map(|v| v + c);
        self.push(out, Op::AddScalar(x))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum over the last axis. A rank-1 input yields shape `[1]`.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        let l = *shape.last().expect("rank >= 1");
        let mut out_shape = shape[..shape.len() - 1].to_vec();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let out: Vec<F> = self.data(x).chunks(l).map(|r| r.iter().copied().sum()).collect();
        self.push(Tensor::from_parts(out_shape, out), Op::SumLast(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape.to_vec())?;
        self.push(out, Op::Reshape(x))
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return dim_err(format!("permute: {perm:?} is not a permutation of rank {}", shape.len()));
        }
        let out = kernels::permute(self.data(x), &shape, perm);
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        self.push(Tensor::from_parts(out_shape, out), Op::Permute(x, perm.to_vec()))
    }

    /// Concatenation along the last axis; leading extents must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return dim_err("concat of zero tensors");
        };
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return dim_err(format!("concat: leading extents {:?} vs {:?}", &s[..s.len() - 1], lead));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows = numel_of(&lead);
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &wd) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[r * wd..(r + 1) * wd]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        self.push(Tensor::from_parts(shape, out), Op::Concat(parts.to_vec()))
    }

    /// Reverse sweep from a one-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<F>> {
        if root.0 >= self.nodes.len() {
            return Err(Error::Usage(format!("backward: unknown node {}", root.0)));
        }
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward: root must be a scalar, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; root.0 + 1];
        let root_shape = self.nodes[root.0].value.shape().to_vec();
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(Tensor::from_parts(root_shape, vec![F::one()]));
        }
        for i in (0..=root.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            for v in node.op.inputs() {
                if v.0 >= i {
                    return Err(Error::Internal(format!("tape order violated: node {i} reads node {}", v.0)));
                }
            }
            self.backprop_node(node, gy.data(), &mut grads)?;
            grads[i] = Some(gy);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let mut grads = grads;
        grads.resize(self.nodes.len(), None);
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<F>>], v: Var, g: Vec<F>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(g) {
                    *a += b;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::from_parts(self.nodes[v.0].value.shape().to_vec(), g));
            }
        }
    }

    fn backprop_node(&self, node: &Node<F>, gy: &[F], grads: &mut [Option<Tensor<F>>]) -> Result<()> {
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if wants(*a) {
                    let da = kernels::matmul_a_bt(gy, self.data(*b), m, n, k);
                    self.accumulate(grads, *a, da);
                }
                if wants(*b) {
                    let db = kernels::matmul_at_b(self.data(*a), gy, m, k, n);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::BatchMatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (xa, xb) = (self.data(*a), self.data(*b));
                if wants(*a) {
                    let mut da = Vec::with_capacity(bs * m * k);
                    for i in 0..bs {
                        da.extend(kernels::matmul_a_bt(&gy[i * m * n..(i + 1) * m * n], &xb[i * k * n..(i + 1) * k * n], m, n, k));
                    }
                    self.accumulate(grads, *a, da);
                }
                if wants(*b) {
                    let mut db = Vec::with_capacity(bs * k * n);
                    for i in 0..bs {
                        db.extend(kernels::matmul_at_b(&xa[i * m * k..(i + 1) * m * k], &gy[i * m * n..(i + 1) * m * n], m, k, n));
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                if wants(*x) {
                    let dx = kernels::conv2d_backward_input(gy, self.data(*w), geom);
                    self.accumulate(grads, *x, dx);
                }
                if wants(*w) {
                    let dw = kernels::conv2d_backward_weight(self.data(*x), gy, geom);
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b.filter(|b| wants(*b)) {
                    self.accumulate(grads, b, kernels::sum_to_last(gy, geom.cout));
                }
            }
            Op::TConv2d { x, w, b, geom } => {
                if wants(*x) {
                    let dx = kernels::tconv_backward_input(gy, self.data(*w), geom);
                    self.accumulate(grads, *x, dx);
                }
                if wants(*w) {
                    let dw = kernels::tconv_backward_weight(self.data(*x), gy, geom);
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b.filter(|b| wants(*b)) {
                    self.accumulate(grads, b, kernels::sum_to_last(gy, geom.cout));
                }
            }
            Op::Upsample { x, scale } => {
                let s = self.shape(*x);
                let dx = kernels::upsample_nearest_backward(gy, s[0], s[1], s[2], s[3], *scale);
                self.accumulate(grads, *x, dx);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let c = self.shape(*gamma)[0];
                let g = self.data(*gamma);
                if wants(*x) {
                    let inv_c = F::one() / F::lit(c as f64);
                    let mut dx = vec![F::zero(); gy.len()];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let (gr, xr) = (&gy[r * c..(r + 1) * c], &xhat[r * c..(r + 1) * c]);
                        let mut mean_d = F::zero();
                        let mut mean_dx = F::zero();
                        for j in 0..c {
                            let d = gr[j] * g[j];
                            mean_d += d;
                            mean_dx += d * xr[j];
                        }
                        mean_d *= inv_c;
                        mean_dx *= inv_c;
                        for j in 0..c {
                            dx[r * c + j] = rs * (gr[j] * g[j] - mean_d - xr[j] * mean_dx);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if wants(*gamma) {
                    let mut dg = vec![F::zero(); c];
                    for (gr, xr) in gy.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            dg[j] += gr[j] * xr[j];
                        }
                    }
                    self.accumulate(grads, *gamma, dg);
                }
                if wants(*beta) {
                    self.accumulate(grads, *beta, kernels::sum_to_last(gy, c));
                }
            }
            Op::Softmax(x) => {
                let l = *node.value.shape().last().expect("rank >= 1");
                let y = node.value.data();
                let mut dx = vec![F::zero(); y.len()];
                for ((dr, yr), gr) in dx.chunks_mut(l).zip(y.chunks(l)).zip(gy.chunks(l)) {
                    let dotp: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..l {
                        dr[j] = yr[j] * (gr[j] - dotp);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Act(x, kind) => {
                let xin = self.data(*x);
                let dx: Vec<F> = match kind {
                    Activation::Relu => {
                        xin.iter().zip(gy).map(|(&v, &g)| if v > F::zero() { g } else { F::zero() }).collect()
                    }
                    Activation::Gelu => xin.iter().zip(gy).map(|(&v, &g)| g * kernels::gelu_grad(v)).collect(),
                    Activation::Sigmoid => {
                        node.value.data().iter().zip(gy).map(|(&y, &g)| g * y * (F::one() - y)).collect()
                    }
                };
                self.accumulate(grads, *x, dx);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gy.to_vec());
                self.accumulate(grads, *b, gy.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gy.to_vec());
                self.accumulate(grads, *b, gy.iter().map(|&g| -g).collect());
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (self.data(*a), self.data(*b));
                if wants(*a) {
                    self.accumulate(grads, *a, gy.iter().zip(xb).map(|(&g, &v)| g * v).collect());
                }
                if wants(*b) {
                    self.accumulate(grads, *b, gy.iter().zip(xa).map(|(&g, &v)| g * v).collect());
                }
            }
            Op::Div(a, b) => {
                let (xa, xb) = (self.data(*a), self.data(*b));
                if wants(*a) {
                    self.accumulate(grads, *a, gy.iter().zip(xb).map(|(&g, &v)| g / v).collect());
                }
                if wants(*b) {
                    let db = gy.iter().zip(xa).zip(xb).map(|((&g, &u), &v)| -g * u / (v * v)).collect();
                    self.accumulate(grads, *b, db);
                }
            }
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, gy.to_vec());
                if wants(*b) {
                    let c = self.shape(*b)[0];
                    self.accumulate(grads, *b, kernels::sum_to_last(gy, c));
                }
            }
            Op::Scale(x, f) => self.accumulate(grads, *x, gy.iter().map(|&g| g * *f).collect()),
            Op::AddScalar(x) => self.accumulate(grads, *x, gy.to_vec()),
            Op::SumAll(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![gy[0]; n]);
            }
            Op::SumLast(x) => {
                let l = *self.shape(*x).last().expect("rank >= 1");
                let dx = gy.iter().flat_map(|&g| std::iter::repeat_n(g, l)).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Reshape(x) => self.accumulate(grads, *x, gy.to_vec()),
            Op::Permute(x, perm) => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let dx = kernels::permute(gy, node.value.shape(), &inverse);
                self.accumulate(grads, *x, dx);
            }
            Op::Concat(parts) => {
                let widths: Vec<usize> = parts.iter().map(|p| *self.shape(*p).last().expect("rank >= 1")).collect();
                let total: usize = widths.iter().sum();
                let rows = gy.len() / total;
                let mut offset = 0;
                for (&p, &wd) in parts.iter().zip(&widths) {
                    if wants(p) {
                        let mut d = Vec::with_capacity(rows * wd);
                        for r in 0..rows {
                            d.extend_from_slice(&gy[r * total + offset..r * total + offset + wd]);
                        }
                        self.accumulate(grads, p, d);
                    }
                    offset += wd;
                }
            }
        }
        Ok(())
    }
}
