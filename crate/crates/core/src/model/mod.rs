//! Network assembly: MetaFormer encoder, five-step UNet decoder with
//! optional multi-scale upsampling cross-links, and the sigmoid head.
//!
//! Encoder: a 7×7 stride-4 stem, then four stages whose features sit at
//! `W/4, W/8, W/16, W/32` with `filters[i]` channels. Stages are joined by
//! 3×3 stride-2 convolutions.
//!
//! Decoder: five ×2 transposed-convolution steps take `W/32` back to `W`.
//! Steps 1–3 concatenate the matching encoder feature and refine it with a
//! 3×3 convolution; steps 4–5 have no encoder skip. Cross-link A merges the
//! step-1 output into the step-3 output, link B merges step 2 into step 4,
//! each a ×4 upsample. `mu_count = 1` enables link A only.

mod config;

pub use config::{Ablation, ModelConfig, MuMode, StageKind};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{
    conv_former_block, mu_block, transformer_block, upsample_link, ConvFormerDims, ConvFormerParams, MuParams,
    NormParams, TransformerParams, UpsampleLinkParams,
};
use crate::engine::{ConvSpec, Graph, Padding, Real, Tensor, Var};
use crate::error::{dim_err, Result};
use crate::params::{BoundParams, ParamBuilder, ParamSet};

/// Encoder features `x1..x4`.
#[derive(Debug, Clone, Copy)]
pub struct FeaturePyramid {
    pub levels: [Var; 4],
}

/// A network configuration together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct M2UNet<F> {
    pub config: ModelConfig,
    pub params: ParamSet<F>,
}

/// Decoder step `k` (1-based): which encoder skip it fuses and its width.
fn decoder_steps(cfg: &ModelConfig) -> [(Option<usize>, usize); 5] {
    let f = cfg.filters;
    [(Some(2), f[2]), (Some(1), f[1]), (Some(0), f[0]), (None, cfg.head_channels), (None, cfg.head_channels)]
}

fn decoder_input_channels(cfg: &ModelConfig, step: usize) -> usize {
    if step == 0 {
        cfg.filters[3]
    } else {
        decoder_steps(cfg)[step - 1].1
    }
}

/// Cross-links: `(prefix, deep step index, shallow step index)` (0-based).
const LINKS: [(&str, usize, usize); 2] = [("dec.link_a", 0, 2), ("dec.link_b", 1, 3)];

fn stage_prefix(i: usize) -> String {
    format!("enc.stage{}", i + 1)
}

/// Creates the parameter set of `cfg` deterministically from `seed`.
///
/// Parameters are drawn in a fixed order with cross-link parameters last,
/// so every ablation of one seed shares its encoder and decoder weights.
pub fn build_model<F: Real>(cfg: &ModelConfig, seed: u64) -> Result<M2UNet<F>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    let mut b = ParamBuilder::new(&mut rng, &mut params);
    let f = cfg.filters;

    b.conv("enc.stem.w".into(), 7, 7, cfg.in_channels, f[0]);
    b.zeros("enc.stem.b".into(), f[0]);
    NormParams::declare(&mut b, "enc.stem.norm", f[0]);
    for i in 0..4 {
        if i > 0 {
            let p = format!("enc.down{}", i + 1);
            NormParams::declare(&mut b, &format!("{p}.norm"), f[i - 1]);
            b.conv(format!("{p}.w"), 3, 3, f[i - 1], f[i]);
            b.zeros(format!("{p}.b"), f[i]);
        }
        for j in 0..cfg.stage_depths[i] {
            let p = format!("{}.block{}", stage_prefix(i), j + 1);
            match cfg.stage_kinds[i] {
                StageKind::Conv => ConvFormerParams::declare(
                    &mut b,
                    &p,
                    ConvFormerDims {
                        channels: f[i],
                        mixer_ratio: cfg.mixer_ratio,
                        kernel: cfg.mixer_kernel,
                        mlp_ratio: cfg.mlp_ratio,
                    },
                ),
                StageKind::Attn => TransformerParams::declare(&mut b, &p, f[i], cfg.mlp_ratio),
            }
        }
    }

    for (k, (skip, width)) in decoder_steps(cfg).into_iter().enumerate() {
        let p = format!("dec.step{}", k + 1);
        let cin = decoder_input_channels(cfg, k);
        b.conv(format!("{p}.up.w"), 2, 2, cin, width);
        b.zeros(format!("{p}.up.b"), width);
        let fused = width + skip.map_or(0, |s| f[s]);
        b.conv(format!("{p}.conv.w"), 3, 3, fused, width);
        b.zeros(format!("{p}.conv.b"), width);
    }

    b.conv("head.w".into(), 1, 1, cfg.head_channels, 1);
    b.zeros("head.b".into(), 1);

    let steps = decoder_steps(cfg);
    for &(prefix, deep, shallow) in LINKS.iter().take(cfg.links()) {
        let (cin, cout) = (steps[deep].1, steps[shallow].1);
        match cfg.mu_mode {
            MuMode::Mu => MuParams::declare(&mut b, prefix, cin, cout),
            MuMode::PlainUpsample => UpsampleLinkParams::declare(&mut b, prefix, cin, cout),
            MuMode::None => {}
        }
    }

    Ok(M2UNet { config: cfg.clone(), params })
}

pub fn encoder_forward<F: Real>(g: &mut Graph<F>, x: Var, p: &BoundParams, cfg: &ModelConfig) -> Result<FeaturePyramid> {
    let s = g.shape(x).to_vec();
    let (w, h) = cfg.image_size;
    if s.len() != 4 || s[1] != h || s[2] != w || s[3] != cfg.in_channels {
        return dim_err(format!(
            "encoder: expected input [N,{h},{w},{}], got {s:?}",
            cfg.in_channels
        ));
    }
    let stem = ConvSpec { stride: 4, ..ConvSpec::same(7) }.with_padding(Padding::Explicit(3));
    let mut cur = g.conv2d(x, p.get("enc.stem.w")?, Some(p.get("enc.stem.b")?), &stem)?;
    cur = NormParams::bind(p, "enc.stem.norm")?.apply(g, cur)?;

    let down = ConvSpec::same(3).with_stride(2).with_padding(Padding::Explicit(1));
    let mut levels = [cur; 4];
    for i in 0..4 {
        if i > 0 {
            let pfx = format!("enc.down{}", i + 1);
            let n = NormParams::bind(p, &format!("{pfx}.norm"))?.apply(g, cur)?;
            cur = g.conv2d(n, p.get(&format!("{pfx}.w"))?, Some(p.get(&format!("{pfx}.b"))?), &down)?;
        }
        for j in 0..cfg.stage_depths[i] {
            let pfx = format!("{}.block{}", stage_prefix(i), j + 1);
            cur = match cfg.stage_kinds[i] {
                StageKind::Conv => conv_former_block(g, cur, &ConvFormerParams::bind(p, &pfx)?)?,
                StageKind::Attn => transformer_block(g, cur, &TransformerParams::bind(p, &pfx, cfg.heads[i])?)?,
            };
        }
        levels[i] = cur;
    }
    Ok(FeaturePyramid { levels })
}

/// Spatial extents `(H, W)` of encoder level `i` (0-based) for `cfg`.
pub fn level_extent(cfg: &ModelConfig, i: usize) -> (usize, usize) {
    let div = 1 << (i + 2);
    (cfg.height() / div, cfg.width() / div)
}

fn check_pyramid<F: Real>(g: &Graph<F>, pyr: &FeaturePyramid, cfg: &ModelConfig) -> Result<usize> {
    let n = g.shape(pyr.levels[0])[0];
    for (i, &v) in pyr.levels.iter().enumerate() {
        let (h, w) = level_extent(cfg, i);
        let want = [n, h, w, cfg.filters[i]];
        if g.shape(v) != want {
            return dim_err(format!("pyramid level {}: expected {want:?}, got {:?}", i + 1, g.shape(v)));
        }
    }
    Ok(n)
}

pub fn decoder_forward<F: Real>(g: &mut Graph<F>, pyr: &FeaturePyramid, p: &BoundParams, cfg: &ModelConfig) -> Result<Var> {
    check_pyramid(g, pyr, cfg)?;
    let refine = ConvSpec::same(3);
    let mut outputs: Vec<Var> = Vec::with_capacity(5);
    let mut cur = pyr.levels[3];
    for (k, (skip, _)) in decoder_steps(cfg).into_iter().enumerate() {
        let pfx = format!("dec.step{}", k + 1);
        let up = g.transpose_conv2d(cur, p.get(&format!("{pfx}.up.w"))?, Some(p.get(&format!("{pfx}.up.b"))?), 2)?;
        let fused = match skip {
            Some(s) => g.concat(&[up, pyr.levels[s]])?,
            None => up,
        };
        let y = g.conv2d(fused, p.get(&format!("{pfx}.conv.w"))?, Some(p.get(&format!("{pfx}.conv.b"))?), &refine)?;
        cur = g.relu(y)?;
        if let Some(&(prefix, deep, _)) = LINKS.iter().take(cfg.links()).find(|l| l.2 == k) {
            cur = match cfg.mu_mode {
                MuMode::Mu => mu_block(g, outputs[deep], cur, &MuParams::bind(p, prefix, cfg.mu_gate)?)?,
                MuMode::PlainUpsample => {
                    upsample_link(g, outputs[deep], cur, &UpsampleLinkParams::bind(p, prefix, cfg.mu_gate)?)?
                }
                MuMode::None => cur,
            };
        }
        outputs.push(cur);
    }
    Ok(cur)
}

/// Pre-sigmoid logits of the head, `[N,H,W,1]`.
pub fn m2unet_logits<F: Real>(g: &mut Graph<F>, x: Var, p: &BoundParams, cfg: &ModelConfig) -> Result<Var> {
    let pyr = encoder_forward(g, x, p, cfg)?;
    let d = decoder_forward(g, &pyr, p, cfg)?;
    g.conv2d(d, p.get("head.w")?, Some(p.get("head.b")?), &ConvSpec::pointwise())
}

/// Foreground probabilities `[N,H,W,1]`.
pub fn m2unet_forward<F: Real>(g: &mut Graph<F>, x: Var, p: &BoundParams, cfg: &ModelConfig) -> Result<Var> {
    let logits = m2unet_logits(g, x, p, cfg)?;
    g.sigmoid(logits)
}

/// Forward-pass outputs materialized as tensors.
#[derive(Debug, Clone)]
pub struct ForwardOutputs<F> {
    pub features: [Tensor<F>; 4],
    pub decoder: Tensor<F>,
    pub probabilities: Tensor<F>,
}

impl<F: Real> M2UNet<F> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        build_model(cfg, seed)
    }

    /// Probabilities for a batch `[N,H,W,C]` without recording gradients.
    pub fn predict(&self, images: &Tensor<F>) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(images.clone());
        let y = m2unet_forward(&mut g, x, &p, &self.config)?;
        Ok(g.value(y).clone())
    }

    /// Encoder features, decoder output and probabilities for a batch.
    pub fn forward_all(&self, images: &Tensor<F>) -> Result<ForwardOutputs<F>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(images.clone());
        let pyr = encoder_forward(&mut g, x, &p, &self.config)?;
        let d = decoder_forward(&mut g, &pyr, &p, &self.config)?;
        let logits = g.conv2d(d, p.get("head.w")?, Some(p.get("head.b")?), &ConvSpec::pointwise())?;
        let y = g.sigmoid(logits)?;
        Ok(ForwardOutputs {
            features: pyr.levels.map(|v| g.value(v).clone()),
            decoder: g.value(d).clone(),
            probabilities: g.value(y).clone(),
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use rand::{Rng, SeedableRng};

    use super::*;
    use crate::error::Error;

    /// Parameter count of the default configuration.
    const DEFAULT_PARAM_COUNT: usize = 16_049_793;

    fn images(seed: u64, n: usize, cfg: &ModelConfig) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(vec![n, cfg.height(), cfg.width(), cfg.in_channels], |_| rng.random_range(-1.0f32..1.0)).unwrap()
    }

    fn names(cfg: &ModelConfig) -> BTreeSet<String> {
        build_model::<f32>(cfg, 0).unwrap().params.names().map(String::from).collect()
    }

    #[test]
    fn default_parameter_count_is_stable() {
        let a = build_model::<f32>(&ModelConfig::default(), 1).unwrap();
        let b = build_model::<f32>(&ModelConfig::default(), 2).unwrap();
        assert_eq!(a.param_count(), DEFAULT_PARAM_COUNT);
        assert_eq!(b.param_count(), DEFAULT_PARAM_COUNT);
    }

    #[test]
    fn same_seed_gives_identical_parameters() {
        let cfg = ModelConfig::tiny();
        assert_eq!(build_model::<f32>(&cfg, 7).unwrap(), build_model::<f32>(&cfg, 7).unwrap());
        assert_ne!(build_model::<f32>(&cfg, 7).unwrap(), build_model::<f32>(&cfg, 8).unwrap());
    }

    #[test]
    fn initialization_follows_the_documented_scheme() {
        let m = build_model::<f64>(&ModelConfig::tiny(), 3).unwrap();
        for (name, t) in m.params.iter() {
            if name.ends_with(".b") || name.ends_with("beta") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            } else if name.ends_with("gamma") {
                assert!(t.data().iter().all(|&v| v == 1.0), "{name}");
            } else {
                let s = t.shape();
                let fan_in: usize = if s.len() == 4 { s[0] * s[1] * s[2] } else { s[0] };
                let bound = (6.0 / fan_in as f64).sqrt();
                assert!(t.data().iter().all(|v| v.abs() <= bound), "{name}");
            }
        }
    }

    #[test]
    fn mu_count_adds_parameters_monotonically() {
        let base = ModelConfig::tiny();
        let none = names(&base.clone().with_ablation(Ablation::Baseline));
        let one = names(&base.clone().with_ablation(Ablation::OneMu));
        let two = names(&base.clone().with_ablation(Ablation::TwoMu));
        assert!(none.is_subset(&one) && one.len() > none.len());
        assert!(one.is_subset(&two) && two.len() > one.len());
        assert!(!none.iter().any(|n| n.starts_with("dec.link")));
        assert!(one.iter().any(|n| n.starts_with("dec.link_a")) && !one.iter().any(|n| n.starts_with("dec.link_b")));
    }

    #[test]
    fn ablations_share_the_backbone_initialization() {
        let base = build_model::<f32>(&ModelConfig::tiny().with_ablation(Ablation::Baseline), 5).unwrap();
        let two = build_model::<f32>(&ModelConfig::tiny().with_ablation(Ablation::TwoMu), 5).unwrap();
        for (name, t) in base.params.iter() {
            assert_eq!(two.params.get(name), Some(t), "{name}");
        }
    }

    #[test]
    fn tiny_shapes() {
        let cfg = ModelConfig::tiny();
        let m = M2UNet::<f32>::new(&cfg, 0).unwrap();
        let out = m.forward_all(&images(0, 2, &cfg)).unwrap();
        let f = cfg.filters;
        let want = [[2, 16, 16, f[0]], [2, 8, 8, f[1]], [2, 4, 4, f[2]], [2, 2, 2, f[3]]];
        for (t, w) in out.features.iter().zip(want) {
            assert_eq!(t.shape(), &w);
        }
        assert_eq!(out.decoder.shape(), &[2, 64, 64, cfg.head_channels]);
        assert_eq!(out.probabilities.shape(), &[2, 64, 64, 1]);
        assert!(out.probabilities.data().iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn non_square_inputs_follow_the_shape_law() {
        let mut cfg = ModelConfig::tiny();
        cfg.image_size = (96, 32);
        let m = M2UNet::<f32>::new(&cfg, 0).unwrap();
        let out = m.forward_all(&images(1, 1, &cfg)).unwrap();
        assert_eq!(out.features[0].shape(), &[1, 8, 24, cfg.filters[0]]);
        assert_eq!(out.features[3].shape(), &[1, 1, 3, cfg.filters[3]]);
        assert_eq!(out.probabilities.shape(), &[1, 32, 96, 1]);
    }

    #[test]
    fn forward_is_deterministic_and_batch_independent() {
        let cfg = ModelConfig::tiny();
        let m = M2UNet::<f32>::new(&cfg, 4).unwrap();
        let x = images(2, 2, &cfg);
        let a = m.predict(&x).unwrap();
        assert_eq!(a, m.predict(&x).unwrap());
        let per = x.numel() / 2;
        let first = Tensor::new(vec![1, 64, 64, 3], x.data()[..per].to_vec()).unwrap();
        let p = m.predict(&first).unwrap();
        assert_eq!(p.data(), &a.data()[..a.numel() / 2]);
    }

    #[test]
    fn wrong_input_size_is_a_dimension_error() {
        let cfg = ModelConfig::tiny();
        let m = M2UNet::<f32>::new(&cfg, 0).unwrap();
        let x = Tensor::zeros(vec![1, 32, 32, 3]).unwrap();
        assert!(matches!(m.predict(&x), Err(Error::Dimension(_))));
    }
}
