//! Finite-difference gradient checks at `f64`.
//!
//! Each check builds a scalar function of a few random tensors, computes
//! its gradient with [`Graph::backward`], and compares every probed
//! coordinate against the central difference
//! `(f(x + h) − f(x − h)) / 2h` with `h = 1e-5`, evaluated with fresh
//! constant-only graphs. The error for one coordinate is
//! `|a − n| / max(|a|, |n|, 1e-6)`.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{
    channel_mlp, conv_former_block, mu_block, transformer_block, upsample_link, ChannelMlpParams, ConvFormerDims,
    ConvFormerParams, MuParams, TransformerParams, UpsampleLinkParams,
};
use crate::engine::{Activation, ConvSpec, Graph, Padding, Tensor, Var};
use crate::error::{Error, Result};
use crate::metrics::{batch_jaccard_loss, jaccard_loss, JACCARD_ALPHA};
use crate::model::{m2unet_forward, ModelConfig, M2UNet};
use crate::params::{BoundParams, ParamBuilder, ParamSet};

pub const FD_STEP: f64 = 1e-5;
/// Magnitude below which errors are measured absolutely.
pub const REL_FLOOR: f64 = 1e-6;
pub const OP_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;
/// Parameters probed per full-model check.
pub const MODEL_PROBES: usize = 200;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// One coordinate of one input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Probe {
    pub input: usize,
    pub index: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub seed: u64,
    pub probes: usize,
    pub max_rel_err: f64,
    pub worst: Option<Probe>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// Every coordinate of the listed inputs.
pub fn all_probes(inputs: &[Tensor<f64>], which: &[usize]) -> Vec<Probe> {
    which.iter().flat_map(|&i| (0..inputs[i].numel()).map(move |index| Probe { input: i, index })).collect()
}

/// `count` distinct coordinates drawn uniformly over the listed inputs.
pub fn sampled_probes(inputs: &[Tensor<f64>], which: &[usize], count: usize, rng: &mut ChaCha8Rng) -> Vec<Probe> {
    let all = all_probes(inputs, which);
    if count >= all.len() {
        return all;
    }
    let mut picked: Vec<usize> = sample(rng, all.len(), count).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| all[i]).collect()
}

fn evaluate<Fun>(inputs: &[Tensor<f64>], f: &Fun) -> Result<f64>
where
    Fun: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.value(out).item()
}

/// Compares backward against central differences on `probes`.
pub fn check<Fun>(name: &str, seed: u64, inputs: &[Tensor<f64>], probes: &[Probe], tolerance: f64, f: Fun) -> Result<GradCheckReport>
where
    Fun: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let mut work = inputs.to_vec();
    let mut report = GradCheckReport {
        name: name.to_string(),
        seed,
        probes: probes.len(),
        max_rel_err: 0.0,
        worst: None,
        tolerance,
    };
    for &probe in probes {
        let orig = work[probe.input].data()[probe.index];
        work[probe.input].data_mut()[probe.index] = orig + FD_STEP;
        let plus = evaluate(&work, &f)?;
        work[probe.input].data_mut()[probe.index] = orig - FD_STEP;
        let minus = evaluate(&work, &f)?;
        work[probe.input].data_mut()[probe.index] = orig;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let err = rel_error(analytic[probe.input].data()[probe.index], numeric);
        if err > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(err);
            report.worst = Some(probe);
        }
    }
    Ok(report)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi)).expect("positive extents")
}

/// Uniform values with magnitude at least `gap`, keeping inputs away from
/// kinks such as ReLU's origin.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(gap..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
    .expect("positive extents")
}

fn binary(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).expect("positive extents")
}

/// Contracts an output tensor with fixed random weights into a scalar.
fn project(g: &mut Graph<f64>, out: Var, weights: Var) -> Result<Var> {
    let p = g.mul(out, weights)?;
    g.sum(p)
}

/// Checks a tensor-valued function by projecting its output onto random
/// weights; the weights are appended as the last (unchecked) input.
fn check_projected<Fun>(name: &str, seed: u64, rng: &mut ChaCha8Rng, mut inputs: Vec<Tensor<f64>>, out_shape: &[usize], f: Fun) -> Result<GradCheckReport>
where
    Fun: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let which: Vec<usize> = (0..inputs.len()).collect();
    inputs.push(uniform(rng, out_shape, -1.0, 1.0));
    let probes = all_probes(&inputs, &which);
    let wi = inputs.len() - 1;
    check(name, seed, &inputs, &probes, OP_TOLERANCE, |g, v| {
        let out = f(g, v)?;
        project(g, out, v[wi])
    })
}

/// Names of the checks, grouped as `module/check`.
pub const CHECKS: &[&str] = &[
    "engine/matmul",
    "engine/batch_matmul",
    "engine/conv2d",
    "engine/conv2d_strided",
    "engine/conv2d_depthwise",
    "engine/conv2d_grouped",
    "engine/transpose_conv2d_s2",
    "engine/transpose_conv2d_s4",
    "engine/upsample_nearest",
    "engine/layer_norm",
    "engine/softmax",
    "engine/gelu",
    "engine/relu",
    "engine/sigmoid",
    "engine/elementwise",
    "engine/shape_ops",
    "engine/shared_input",
    "blocks/channel_mlp",
    "blocks/conv_former",
    "blocks/transformer",
    "blocks/mu",
    "blocks/upsample_link",
    "loss/jaccard",
    "loss/batch_jaccard",
    "model/full",
    "model/tiny",
];

/// Checks whose name starts with `filter` (all when `None`).
pub fn select(filter: Option<&str>) -> Vec<&'static str> {
    CHECKS.iter().copied().filter(|c| filter.is_none_or(|f| c.starts_with(f) || c.ends_with(f))).collect()
}

fn block_params(seed: u64, declare: impl FnOnce(&mut ParamBuilder<f64>)) -> (Vec<String>, Vec<Tensor<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut set = ParamSet::new();
    declare(&mut ParamBuilder::new(&mut rng, &mut set));
    // Start norms away from identity so their gradients are exercised.
    let mut r2 = ChaCha8Rng::seed_from_u64(seed.wrapping_add(17));
    for (name, t) in set.iter_mut() {
        if name.ends_with("gamma") || name.ends_with("beta") || name.ends_with(".b") {
            for v in t.data_mut() {
                *v += r2.random_range(-0.5..0.5);
            }
        }
    }
    let names = set.names().map(String::from).collect();
    let tensors = set.iter().map(|(_, t)| t.clone()).collect();
    (names, tensors)
}

fn bind_slice(names: &[String], vars: &[Var]) -> BoundParams {
    BoundParams::from_pairs(names.iter().cloned().zip(vars.iter().copied()))
}

/// Runs one named check for one seed.
pub fn run(name: &str, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    match name {
        "engine/matmul" => {
            let ins = vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4, 2], -1.0, 1.0)];
            check_projected(name, seed, r, ins, &[3, 2], |g, v| g.matmul(v[0], v[1]))
        }
        "engine/batch_matmul" => {
            let ins = vec![uniform(r, &[2, 3, 4], -1.0, 1.0), uniform(r, &[2, 4, 3], -1.0, 1.0)];
            check_projected(name, seed, r, ins, &[2, 3, 3], |g, v| g.batch_matmul(v[0], v[1]))
        }
        "engine/conv2d" => {
            let ins = vec![uniform(r, &[2, 4, 4, 3], -1.0, 1.0), uniform(r, &[3, 3, 3, 4], -1.0, 1.0), uniform(r, &[4], -1.0, 1.0)];
            check_projected(name, seed, r, ins, &[2, 4, 4, 4], |g, v| g.conv2d(v[0], v[1], Some(v[2]), &ConvSpec::same(3)))
        }
        "engine/conv2d_strided" => {
            let spec = ConvSpec::same(3).with_stride(2).with_padding(Padding::Explicit(1));
            let ins = vec![uniform(r, &[1, 4, 4, 2], -1.0, 1.0), uniform(r, &[3, 3, 2, 3], -1.0, 1.0), uniform(r, &[3], -1.0, 1.0)];
            check_projected(name, seed, r, ins, &[1, 2, 2, 3], move |g, v| g.conv2d(v[0], v[1], Some(v[2]), &spec))
        }
        "engine/conv2d_depthwise" => {
            let ins = vec![uniform(r, &[2, 4, 4, 3], -1.0, 1.0), uniform(r, &[3, 3, 1, 3], -1.0, 1.0)];
            check_projected(name, seed, r, ins, &[2, 4, 4, 3], |g, v| g.conv2d(v[0], v[1], None, &ConvSpec::depthwise(3, 3)))
        }
        "engine/conv2d_grouped" => {
            let spec = ConvSpec { groups: 2, ..ConvSpec::same(3) };
            let ins = vec![uniform(r, &[1, 3, 4, 4], -1.0, 1.0), uniform(r, &[3, 3, 2, 4], -1.0, 1.0)];
            check_projected(name, seed, r, ins, &[1, 3, 4, 4], move |g, v| g.conv2d(v[0], v[1], None, &spec))
        }
        "engine/transpose_conv2d_s2" => {
            let ins = vec![uniform(r, &[2, 2, 2, 3], -1.0, 1.0), uniform(r, &[2, 2, 3, 2], -1.0, 1.0), uniform(r, &[2], -1.0, 1.0)];
            check_projected(name, seed, r, ins, &[2, 4, 4, 2], |g, v| g.transpose_conv2d(v[0], v[1], Some(v[2]), 2))
        }
        "engine/transpose_conv2d_s4" => {
            let ins = vec![uniform(r, &[1, 2, 1, 2], -1.0, 1.0), uniform(r, &[4, 4, 2, 2], -1.0, 1.0)];
            check_projected(name, seed, r, ins, &[1, 8, 4, 2], |g, v| g.transpose_conv2d(v[0], v[1], None, 4))
        }
        "engine/upsample_nearest" => {
            let ins = vec![uniform(r, &[2, 2, 3, 2], -1.0, 1.0)];
            check_projected(name, seed, r, ins, &[2, 4, 6, 2], |g, v| g.upsample_nearest(v[0], 2))
        }
        "engine/layer_norm" => {
            let ins = vec![uniform(r, &[2, 3, 4], -1.0, 1.0), uniform(r, &[4], 0.5, 1.5), uniform(r, &[4], -0.5, 0.5)];
            check_projected(name, seed, r, ins, &[2, 3, 4], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-6))
        }
        "engine/softmax" => {
            let ins = vec![uniform(r, &[3, 4], -2.0, 2.0)];
            check_projected(name, seed, r, ins, &[3, 4], |g, v| g.softmax(v[0]))
        }
        "engine/gelu" | "engine/sigmoid" => {
            let kind = if name.ends_with("gelu") { Activation::Gelu } else { Activation::Sigmoid };
            let ins = vec![uniform(r, &[4, 4], -3.0, 3.0)];
            check_projected(name, seed, r, ins, &[4, 4], move |g, v| g.activation(v[0], kind))
        }
        "engine/relu" => {
            let ins = vec![away_from_zero(r, &[4, 4], 0.05)];
            check_projected(name, seed, r, ins, &[4, 4], |g, v| g.relu(v[0]))
        }
        "engine/elementwise" => {
            let ins = vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[3, 4], 0.5, 1.5), uniform(r, &[4], -1.0, 1.0)];
            check_projected(name, seed, r, ins, &[3, 4], |g, v| {
                let a = g.add(v[0], v[1])?;
                let m = g.mul(a, v[0])?;
                let d = g.div(m, v[1])?;
                let s = g.sub(d, v[1])?;
                let s = g.scale(s, 0.75)?;
                let s = g.add_scalar(s, -0.25)?;
                g.add_bias(s, v[2])
            })
        }
        "engine/shape_ops" => {
            let ins = vec![uniform(r, &[2, 3, 4], -1.0, 1.0), uniform(r, &[2, 3, 2], -1.0, 1.0)];
            check_projected(name, seed, r, ins, &[3, 2, 5], |g, v| {
                let c = g.concat(&[v[0], v[1]])?;
                let p = g.permute(c, &[1, 0, 2])?;
                let q = g.reshape(p, &[3, 2, 2, 3])?;
                let s = g.sum_last(q)?;
                let t = g.mul(s, s)?;
                let t = g.reshape(t, &[3, 2, 2, 1])?;
                let t = g.sum_last(t)?;
                let t = g.reshape(t, &[3, 2, 2])?;
                let u = g.permute(c, &[1, 2, 0])?;
                let u = g.reshape(u, &[3, 6, 2])?;
                let u = g.sum_last(u)?;
                let u = g.reshape(u, &[3, 2, 3])?;
                let head = g.reshape(t, &[3, 4])?;
                let tail = g.reshape(u, &[3, 6])?;
                let both = g.concat(&[head, tail])?;
                g.reshape(both, &[3, 2, 5])
            })
        }
        "engine/shared_input" => {
            let ins = vec![uniform(r, &[3, 3], -1.0, 1.0)];
            check_projected(name, seed, r, ins, &[3, 3], |g, v| {
                let sq = g.mul(v[0], v[0])?;
                let e = g.gelu(v[0])?;
                let m = g.matmul(v[0], v[0])?;
                let a = g.add(sq, e)?;
                g.add(a, m)
            })
        }
        "blocks/channel_mlp" => {
            let (names, mut ins) = block_params(seed, |b| ChannelMlpParams::declare(b, "m", 3, 2));
            ins.push(uniform(r, &[2, 2, 3, 3], -1.0, 1.0));
            let xi = ins.len() - 1;
            check_projected(name, seed, r, ins, &[2, 2, 3, 3], move |g, v| {
                let p = ChannelMlpParams::bind(&bind_slice(&names, v), "m")?;
                channel_mlp(g, v[xi], &p)
            })
        }
        "blocks/conv_former" => {
            let dims = ConvFormerDims { channels: 3, mixer_ratio: 2, kernel: 3, mlp_ratio: 2 };
            let (names, mut ins) = block_params(seed, |b| ConvFormerParams::declare(b, "c", dims));
            ins.push(uniform(r, &[2, 4, 4, 3], -1.0, 1.0));
            let xi = ins.len() - 1;
            check_projected(name, seed, r, ins, &[2, 4, 4, 3], move |g, v| {
                let p = ConvFormerParams::bind(&bind_slice(&names, v), "c")?;
                conv_former_block(g, v[xi], &p)
            })
        }
        "blocks/transformer" => {
            let (names, mut ins) = block_params(seed, |b| TransformerParams::declare(b, "t", 4, 2));
            ins.push(uniform(r, &[2, 2, 3, 4], -1.0, 1.0));
            let xi = ins.len() - 1;
            check_projected(name, seed, r, ins, &[2, 2, 3, 4], move |g, v| {
                let p = TransformerParams::bind(&bind_slice(&names, v), "t", 2)?;
                transformer_block(g, v[xi], &p)
            })
        }
        "blocks/mu" | "blocks/upsample_link" => {
            let full = name == "blocks/mu";
            let (names, mut ins) = block_params(seed, |b| {
                if full {
                    MuParams::declare(b, "u", 3, 2)
                } else {
                    UpsampleLinkParams::declare(b, "u", 3, 2)
                }
            });
            ins.push(uniform(r, &[2, 1, 1, 3], -1.0, 1.0));
            ins.push(uniform(r, &[2, 4, 4, 2], -1.0, 1.0));
            let (di, si) = (ins.len() - 2, ins.len() - 1);
            // A sigmoid gate keeps the merge differentiable everywhere.
            check_projected(name, seed, r, ins, &[2, 4, 4, 2], move |g, v| {
                let bound = bind_slice(&names, v);
                if full {
                    mu_block(g, v[di], v[si], &MuParams::bind(&bound, "u", Activation::Sigmoid)?)
                } else {
                    upsample_link(g, v[di], v[si], &UpsampleLinkParams::bind(&bound, "u", Activation::Sigmoid)?)
                }
            })
        }
        "loss/jaccard" | "loss/batch_jaccard" => {
            let batched = name.ends_with("batch_jaccard");
            let shape: &[usize] = if batched { &[2, 4, 4] } else { &[4, 4] };
            let ins = vec![uniform(r, shape, 0.05, 0.95), binary(r, shape)];
            let probes = all_probes(&ins, &[0]);
            check(name, seed, &ins, &probes, OP_TOLERANCE, move |g, v| {
                if batched {
                    batch_jaccard_loss(g, v[1], v[0], JACCARD_ALPHA)
                } else {
                    jaccard_loss(g, v[1], v[0], JACCARD_ALPHA)
                }
            })
        }
        "model/full" => check_model(name, &ModelConfig::gradcheck(), seed, MODEL_PROBES),
        "model/tiny" => check_model(name, &ModelConfig { image_size: (32, 32), ..ModelConfig::tiny() }, seed, MODEL_PROBES),
        other => Err(Error::Usage(format!("unknown gradient check `{other}`"))),
    }
}

/// Full-network check: Jaccard loss of the network's output against a
/// random mask, probed on `probes` randomly chosen parameters.
pub fn check_model(name: &str, cfg: &ModelConfig, seed: u64, probes: usize) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = M2UNet::<f64>::new(cfg, seed)?;
    let (w, h) = cfg.image_size;
    let image = uniform(&mut rng, &[1, h, w, cfg.in_channels], -1.0, 1.0);
    let mask = binary(&mut rng, &[1, h, w, 1]);
    let names: Vec<String> = model.params.names().map(String::from).collect();
    let mut inputs: Vec<Tensor<f64>> = model.params.iter().map(|(_, t)| t.clone()).collect();
    // Perturb zero-initialized biases and norm shifts so they are not all
    // sitting at the same point.
    for (name, t) in names.iter().zip(inputs.iter_mut()) {
        if name.ends_with(".b") || name.ends_with("beta") {
            for v in t.data_mut() {
                *v = rng.random_range(-0.1..0.1);
            }
        }
    }
    let np = inputs.len();
    inputs.push(image);
    inputs.push(mask);
    let which: Vec<usize> = (0..np).collect();
    let probe_set = sampled_probes(&inputs, &which, probes, &mut rng);
    let cfg = cfg.clone();
    check(name, seed, &inputs, &probe_set, MODEL_TOLERANCE, move |g, v| {
        let bound = BoundParams::from_pairs(names.iter().cloned().zip(v[..np].iter().copied()));
        let y = m2unet_forward(g, v[np], &bound, &cfg)?;
        batch_jaccard_loss(g, v[np + 1], y, JACCARD_ALPHA)
    })
}
