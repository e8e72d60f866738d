//! Building blocks of the network: the ConvFormer and Transformer
//! MetaFormer layers, their shared channel MLP, and the multi-scale
//! upsampling (MU) decoder link.
//!
//! Every block takes and returns NHWC tensors recorded on a [`Graph`].

use crate::engine::{Activation, ConvSpec, Graph, Real, Var};
use crate::error::{config_err, dim_err, Result};
use crate::params::{BoundParams, ParamBuilder};

/// Layer-norm epsilon used by every block.
pub const NORM_EPS: f64 = 1e-6;

/// Affine pair of a channel layer norm.
#[derive(Debug, Clone, Copy)]
pub struct NormParams {
    pub gamma: Var,
    pub beta: Var,
}

impl NormParams {
    pub fn declare<F: Real>(b: &mut ParamBuilder<F>, prefix: &str, channels: usize) {
        b.ones(format!("{prefix}.gamma"), channels);
        b.zeros(format!("{prefix}.beta"), channels);
    }

    pub fn bind(p: &BoundParams, prefix: &str) -> Result<Self> {
        Ok(NormParams { gamma: p.get(&format!("{prefix}.gamma"))?, beta: p.get(&format!("{prefix}.beta"))? })
    }

    pub fn apply<F: Real>(&self, g: &mut Graph<F>, x: Var) -> Result<Var> {
        g.layer_norm(x, self.gamma, self.beta, NORM_EPS)
    }
}

/// Pre-norm channel MLP: `x + gelu(norm(x)·W1)·W2`.
#[derive(Debug, Clone, Copy)]
pub struct ChannelMlpParams {
    pub norm: NormParams,
    /// `[C, e·C]`
    pub w1: Var,
    /// `[e·C, C]`
    pub w2: Var,
}

impl ChannelMlpParams {
    pub fn declare<F: Real>(b: &mut ParamBuilder<F>, prefix: &str, channels: usize, expansion: usize) {
        NormParams::declare(b, &format!("{prefix}.norm"), channels);
        b.matrix(format!("{prefix}.w1"), channels, expansion * channels);
        b.matrix(format!("{prefix}.w2"), expansion * channels, channels);
    }

    pub fn bind(p: &BoundParams, prefix: &str) -> Result<Self> {
        Ok(ChannelMlpParams {
            norm: NormParams::bind(p, &format!("{prefix}.norm"))?,
            w1: p.get(&format!("{prefix}.w1"))?,
            w2: p.get(&format!("{prefix}.w2"))?,
        })
    }
}

/// `x · W` over the last axis of an arbitrary-rank tensor.
pub fn linear<F: Real>(g: &mut Graph<F>, x: Var, w: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let c = *shape.last().expect("rank >= 1");
    let ws = g.shape(w);
    if ws.len() != 2 || ws[0] != c {
        return dim_err(format!("linear: input {shape:?} cannot be projected by {ws:?}"));
    }
    let cout = ws[1];
    let rows = shape.iter().product::<usize>() / c;
    let flat = g.reshape(x, &[rows, c])?;
    let y = g.matmul(flat, w)?;
    let mut out_shape = shape;
    *out_shape.last_mut().expect("rank >= 1") = cout;
    g.reshape(y, &out_shape)
}

pub fn channel_mlp<F: Real>(g: &mut Graph<F>, x: Var, p: &ChannelMlpParams) -> Result<Var> {
    let n = p.norm.apply(g, x)?;
    let h = linear(g, n, p.w1)?;
    let h = g.gelu(h)?;
    let h = linear(g, h, p.w2)?;
    g.add(x, h)
}

/// ConvFormer layer: separable-convolution token mixer (pointwise →
/// GELU → depthwise → pointwise) followed by the channel MLP.
#[derive(Debug, Clone, Copy)]
pub struct ConvFormerParams {
    pub norm1: NormParams,
    /// `[1, 1, C, r·C]`
    pub pw1: Var,
    /// `[k, k, 1, r·C]`
    pub dw: Var,
    /// `[1, 1, r·C, C]`
    pub pw2: Var,
    pub mlp: ChannelMlpParams,
}

/// Widths of a ConvFormer layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvFormerDims {
    pub channels: usize,
    pub mixer_ratio: usize,
    pub kernel: usize,
    pub mlp_ratio: usize,
}

impl ConvFormerParams {
    pub fn declare<F: Real>(b: &mut ParamBuilder<F>, prefix: &str, d: ConvFormerDims) {
        let hidden = d.mixer_ratio * d.channels;
        NormParams::declare(b, &format!("{prefix}.norm1"), d.channels);
        b.conv(format!("{prefix}.pw1"), 1, 1, d.channels, hidden);
        b.conv(format!("{prefix}.dw"), d.kernel, d.kernel, 1, hidden);
        b.conv(format!("{prefix}.pw2"), 1, 1, hidden, d.channels);
        ChannelMlpParams::declare(b, &format!("{prefix}.mlp"), d.channels, d.mlp_ratio);
    }

    pub fn bind(p: &BoundParams, prefix: &str) -> Result<Self> {
        Ok(ConvFormerParams {
            norm1: NormParams::bind(p, &format!("{prefix}.norm1"))?,
            pw1: p.get(&format!("{prefix}.pw1"))?,
            dw: p.get(&format!("{prefix}.dw"))?,
            pw2: p.get(&format!("{prefix}.pw2"))?,
            mlp: ChannelMlpParams::bind(p, &format!("{prefix}.mlp"))?,
        })
    }
}

/// `pw2(dw(gelu(pw1(x))))`
pub fn sep_conv_mixer<F: Real>(g: &mut Graph<F>, x: Var, p: &ConvFormerParams) -> Result<Var> {
    let h = g.conv2d(x, p.pw1, None, &ConvSpec::pointwise())?;
    let h = g.gelu(h)?;
    let (k, hidden) = (g.shape(p.dw)[0], g.shape(p.dw)[3]);
    let h = g.conv2d(h, p.dw, None, &ConvSpec::depthwise(k, hidden))?;
    g.conv2d(h, p.pw2, None, &ConvSpec::pointwise())
}

pub fn conv_former_block<F: Real>(g: &mut Graph<F>, x: Var, p: &ConvFormerParams) -> Result<Var> {
    check_nhwc(g, x, "conv_former_block")?;
    let n = p.norm1.apply(g, x)?;
    let m = sep_conv_mixer(g, n, p)?;
    let x = g.add(x, m)?;
    channel_mlp(g, x, &p.mlp)
}

/// Transformer layer: multi-head self-attention over the flattened
/// spatial positions (no positional embedding) and the channel MLP.
#[derive(Debug, Clone, Copy)]
pub struct TransformerParams {
    pub norm1: NormParams,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub heads: usize,
    pub mlp: ChannelMlpParams,
}

impl TransformerParams {
    pub fn declare<F: Real>(b: &mut ParamBuilder<F>, prefix: &str, channels: usize, mlp_ratio: usize) {
        NormParams::declare(b, &format!("{prefix}.norm1"), channels);
        for w in ["wq", "wk", "wv", "wo"] {
            b.matrix(format!("{prefix}.{w}"), channels, channels);
        }
        ChannelMlpParams::declare(b, &format!("{prefix}.mlp"), channels, mlp_ratio);
    }

    pub fn bind(p: &BoundParams, prefix: &str, heads: usize) -> Result<Self> {
        Ok(TransformerParams {
            norm1: NormParams::bind(p, &format!("{prefix}.norm1"))?,
            wq: p.get(&format!("{prefix}.wq"))?,
            wk: p.get(&format!("{prefix}.wk"))?,
            wv: p.get(&format!("{prefix}.wv"))?,
            wo: p.get(&format!("{prefix}.wo"))?,
            heads,
            mlp: ChannelMlpParams::bind(p, &format!("{prefix}.mlp"))?,
        })
    }
}

/// Scaled dot-product attention per head with scale `1/sqrt(C/heads)`,
/// projected back through `wo`.
pub fn self_attention<F: Real>(g: &mut Graph<F>, x: Var, p: &TransformerParams) -> Result<Var> {
    let [n, h, w, c] = check_nhwc(g, x, "self_attention")?;
    if p.heads == 0 || c % p.heads != 0 {
        return config_err(format!("self_attention: {} heads do not divide {c} channels", p.heads));
    }
    let (l, heads, d) = (h * w, p.heads, c / p.heads);
    let tokens = g.reshape(x, &[n * l, c])?;
    let split = |g: &mut Graph<F>, proj: Var, perm: &[usize], shape: &[usize]| -> Result<Var> {
        let y = g.matmul(tokens, proj)?;
        let y = g.reshape(y, &[n, l, heads, d])?;
        let y = g.permute(y, perm)?;
        g.reshape(y, shape)
    };
    let q = split(g, p.wq, &[0, 2, 1, 3], &[n * heads, l, d])?;
    let kt = split(g, p.wk, &[0, 2, 3, 1], &[n * heads, d, l])?;
    let v = split(g, p.wv, &[0, 2, 1, 3], &[n * heads, l, d])?;
    let scores = g.batch_matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (d as f64).sqrt())?;
    let attn = g.softmax(scores)?;
    let ctx = g.batch_matmul(attn, v)?;
    let ctx = g.reshape(ctx, &[n, heads, l, d])?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[n * l, c])?;
    let out = g.matmul(ctx, p.wo)?;
    g.reshape(out, &[n, h, w, c])
}

pub fn transformer_block<F: Real>(g: &mut Graph<F>, x: Var, p: &TransformerParams) -> Result<Var> {
    let nx = p.norm1.apply(g, x)?;
    let a = self_attention(g, nx, p)?;
    let x = g.add(x, a)?;
    channel_mlp(g, x, &p.mlp)
}

/// Multi-scale upsampling link: nearest ×`scale` upsample of the deep
/// feature, parallel 3×3 and 7×7 convolutions summed, added into the
/// shallow feature and passed through `gate`.
#[derive(Debug, Clone, Copy)]
pub struct MuParams {
    pub conv3_w: Var,
    pub conv3_b: Var,
    pub conv7_w: Var,
    pub conv7_b: Var,
    pub scale: usize,
    pub gate: Activation,
}

pub const MU_SCALE: usize = 4;

impl MuParams {
    pub fn declare<F: Real>(b: &mut ParamBuilder<F>, prefix: &str, cin: usize, cout: usize) {
        b.conv(format!("{prefix}.conv3.w"), 3, 3, cin, cout);
        b.zeros(format!("{prefix}.conv3.b"), cout);
        b.conv(format!("{prefix}.conv7.w"), 7, 7, cin, cout);
        b.zeros(format!("{prefix}.conv7.b"), cout);
    }

    pub fn bind(p: &BoundParams, prefix: &str, gate: Activation) -> Result<Self> {
        Ok(MuParams {
            conv3_w: p.get(&format!("{prefix}.conv3.w"))?,
            conv3_b: p.get(&format!("{prefix}.conv3.b"))?,
            conv7_w: p.get(&format!("{prefix}.conv7.w"))?,
            conv7_b: p.get(&format!("{prefix}.conv7.b"))?,
            scale: MU_SCALE,
            gate,
        })
    }
}

fn check_mu_extents(deep: [usize; 4], shallow: [usize; 4], scale: usize) -> Result<()> {
    if deep[0] != shallow[0] || deep[1] * scale != shallow[1] || deep[2] * scale != shallow[2] {
        return dim_err(format!(
            "mu_block: shallow feature {shallow:?} must be exactly {scale}× the deep feature {deep:?} spatially"
        ));
    }
    Ok(())
}

pub fn mu_block<F: Real>(g: &mut Graph<F>, x_deep: Var, x_shallow: Var, p: &MuParams) -> Result<Var> {
    let deep = check_nhwc(g, x_deep, "mu_block")?;
    let shallow = check_nhwc(g, x_shallow, "mu_block")?;
    check_mu_extents(deep, shallow, p.scale)?;
    let u = g.upsample_nearest(x_deep, p.scale)?;
    let a = g.conv2d(u, p.conv3_w, Some(p.conv3_b), &ConvSpec::same(3))?;
    let b = g.conv2d(u, p.conv7_w, Some(p.conv7_b), &ConvSpec::same(7))?;
    if g.shape(a)[3] != shallow[3] {
        return dim_err(format!("mu_block: merge yields {} channels, shallow feature has {}", g.shape(a)[3], shallow[3]));
    }
    let m = g.add(a, b)?;
    let s = g.add(x_shallow, m)?;
    g.activation(s, p.gate)
}

/// The "+Upsampling" ablation link: the multi-scale convolutions are
/// replaced by a 1×1 channel projection of the upsampled deep feature.
#[derive(Debug, Clone, Copy)]
pub struct UpsampleLinkParams {
    pub proj_w: Var,
    pub proj_b: Var,
    pub scale: usize,
    pub gate: Activation,
}

impl UpsampleLinkParams {
    pub fn declare<F: Real>(b: &mut ParamBuilder<F>, prefix: &str, cin: usize, cout: usize) {
        b.conv(format!("{prefix}.proj.w"), 1, 1, cin, cout);
        b.zeros(format!("{prefix}.proj.b"), cout);
    }

    pub fn bind(p: &BoundParams, prefix: &str, gate: Activation) -> Result<Self> {
        Ok(UpsampleLinkParams {
            proj_w: p.get(&format!("{prefix}.proj.w"))?,
            proj_b: p.get(&format!("{prefix}.proj.b"))?,
            scale: MU_SCALE,
            gate,
        })
    }
}

pub fn upsample_link<F: Real>(g: &mut Graph<F>, x_deep: Var, x_shallow: Var, p: &UpsampleLinkParams) -> Result<Var> {
    let deep = check_nhwc(g, x_deep, "upsample_link")?;
    let shallow = check_nhwc(g, x_shallow, "upsample_link")?;
    check_mu_extents(deep, shallow, p.scale)?;
    let u = g.upsample_nearest(x_deep, p.scale)?;
    let m = g.conv2d(u, p.proj_w, Some(p.proj_b), &ConvSpec::pointwise())?;
    let s = g.add(x_shallow, m)?;
    g.activation(s, p.gate)
}

fn check_nhwc<F: Real>(g: &Graph<F>, x: Var, op: &str) -> Result<[usize; 4]> {
    match *g.shape(x) {
        [n, h, w, c] => Ok([n, h, w, c]),
        ref s => dim_err(format!("{op}: expected an [N,H,W,C] tensor, got {s:?}")),
    }
}
