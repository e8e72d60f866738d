//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use m2unet::blocks::{
    channel_mlp, conv_former_block, transformer_block, ChannelMlpParams, ConvFormerDims, ConvFormerParams,
    TransformerParams,
};
use m2unet::data::{normalize, preprocess, read_pnm, synth_polyp_dataset, AugmentConfig};
use m2unet::engine::{Graph, Tensor};
use m2unet::gradcheck::{self, CHECKS, MODEL_TOLERANCE, OP_TOLERANCE};
use m2unet::metrics::{dice, iou, jaccard_loss_value};
use m2unet::model::{Ablation, M2UNet, ModelConfig};
use m2unet::params::{ParamBuilder, ParamSet};
use m2unet::trainer::{Checkpoint, DataSource, TrainConfig, Trainer};

const GRADCHECK_SEEDS: u64 = 20;
const GRADCHECK_BUDGET: Duration = Duration::from_secs(120);
const SHAPE_TRIALS: usize = 50;
/// Largest side drawn for the shape law.
const SHAPE_MAX_SIDE: usize = 192;
const DEFAULT_FILTERS: [usize; 4] = [64, 128, 320, 512];
const DECODER_CHANNELS: usize = 64;
const IDENTITY_INPUTS: usize = 20;
const JACCARD_HAND_VALUE: f64 = 0.4117647;
const JACCARD_HAND_TOL: f64 = 1e-6;
const METRIC_PAIRS: usize = 100;
const IOU_DICE_TOL: f64 = 1e-9;
const OVERFIT_DICE: f64 = 0.95;
const OVERFIT_MAX_STEPS: u64 = 500;
const OVERFIT_BUDGET: Duration = Duration::from_secs(600);
const OVERFIT_LR: f64 = 3e-3;
const DETERMINISM_STEPS: usize = 10;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let (mut worst_op, mut worst_model) = (0.0f64, 0.0f64);
    for name in CHECKS {
        for seed in 0..GRADCHECK_SEEDS {
            let r = gradcheck::run(name, seed).map_err(err)?;
            ensure(r.passed(), || format!("{name} seed {seed}: rel err {:.3e} ≥ {:.0e}", r.max_rel_err, r.tolerance))?;
            if name.starts_with("model") {
                ensure(r.tolerance == MODEL_TOLERANCE, || format!("{name} uses tolerance {}", r.tolerance))?;
                worst_model = worst_model.max(r.max_rel_err);
            } else {
                ensure(r.tolerance == OP_TOLERANCE, || format!("{name} uses tolerance {}", r.tolerance))?;
                worst_op = worst_op.max(r.max_rel_err);
            }
        }
    }
    let elapsed = start.elapsed();
    ensure(elapsed < GRADCHECK_BUDGET, || format!("took {elapsed:.1?}, budget {GRADCHECK_BUDGET:?}"))?;
    Ok(format!(
        "{} checks × {GRADCHECK_SEEDS} seeds, worst op {worst_op:.2e} (< {OP_TOLERANCE:.0e}), worst model {worst_model:.2e} (< {MODEL_TOLERANCE:.0e}), {elapsed:.1?}",
        CHECKS.len()
    ))
}

fn shape_law() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let sides = SHAPE_MAX_SIDE / 32;
    let template = M2UNet::<f32>::new(&ModelConfig::default(), 0).map_err(err)?;
    for _ in 0..SHAPE_TRIALS {
        let (w, h) = (32 * rng.random_range(1..=sides), 32 * rng.random_range(1..=sides));
        let cfg = ModelConfig { image_size: (w, h), ..ModelConfig::default() };
        ensure(cfg.filters == DEFAULT_FILTERS, || format!("default filters are {:?}", cfg.filters))?;
        let model = M2UNet { config: cfg.clone(), params: template.params.clone() };
        let x = Tensor::from_fn(vec![1, h, w, 3], |_| rng.random_range(-1.0f32..1.0)).map_err(err)?;
        let out = model.forward_all(&x).map_err(err)?;
        for (i, f) in out.features.iter().enumerate() {
            let div = 1 << (i + 2);
            let want = [1, h / div, w / div, DEFAULT_FILTERS[i]];
            ensure(f.shape() == want, || format!("{w}×{h} level {}: {:?} != {want:?}", i + 1, f.shape()))?;
        }
        ensure(out.decoder.shape() == [1, h, w, DECODER_CHANNELS], || format!("{w}×{h} decoder {:?}", out.decoder.shape()))?;
        ensure(out.probabilities.shape() == [1, h, w, 1], || format!("{w}×{h} head {:?}", out.probabilities.shape()))?;
    }
    Ok(format!("{SHAPE_TRIALS} sizes in 32..={SHAPE_MAX_SIDE}, default filters {DEFAULT_FILTERS:?}"))
}

fn random_set(seed: u64, declare: impl FnOnce(&mut ParamBuilder<f32>), zero: &[&str]) -> ParamSet<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = ParamSet::new();
    declare(&mut ParamBuilder::new(&mut rng, &mut set));
    let mut perturb = ChaCha8Rng::seed_from_u64(seed + 100);
    for (name, t) in set.iter_mut() {
        if zero.iter().any(|s| name.ends_with(s)) {
            t.data_mut().fill(0.0);
        } else if name.ends_with("gamma") || name.ends_with("beta") {
            t.data_mut().iter_mut().for_each(|v| *v += perturb.random_range(-0.5f32..0.5));
        }
    }
    set
}

fn residual_identity() -> Outcome {
    let c = 32;
    let dims = ConvFormerDims { channels: c, mixer_ratio: 2, kernel: 7, mlp_ratio: 4 };
    let cf = random_set(1, |b| ConvFormerParams::declare(b, "c", dims), &[".pw2", ".mlp.w2"]);
    let tr = random_set(2, |b| TransformerParams::declare(b, "t", c, 4), &[".wo", ".mlp.w2"]);
    let mlp = random_set(3, |b| ChannelMlpParams::declare(b, "m", c, 4), &[".w2"]);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for k in 0..IDENTITY_INPUTS {
        let x0 = Tensor::from_fn(vec![2, 8, 8, c], |_| rng.random_range(-4.0f32..4.0)).map_err(err)?;
        let mut g = Graph::new();
        let x = g.constant(x0.clone());
        let outs = [
            ("ConvFormer", {
                let p = cf.bind(&mut g, false);
                conv_former_block(&mut g, x, &ConvFormerParams::bind(&p, "c").map_err(err)?).map_err(err)?
            }),
            ("Transformer", {
                let p = tr.bind(&mut g, false);
                transformer_block(&mut g, x, &TransformerParams::bind(&p, "t", 4).map_err(err)?).map_err(err)?
            }),
            ("MLP", {
                let p = mlp.bind(&mut g, false);
                channel_mlp(&mut g, x, &ChannelMlpParams::bind(&p, "m").map_err(err)?).map_err(err)?
            }),
        ];
        for (name, y) in outs {
            let same = g.value(y).data().iter().zip(x0.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            ensure(same, || format!("{name} is not the identity on input {k}"))?;
        }
    }
    Ok(format!("ConvFormer, Transformer and MLP bitwise identity on {IDENTITY_INPUTS} f32 inputs"))
}

fn loss_metric_oracles() -> Outcome {
    let one = Tensor::new(vec![1], vec![1.0f64]).map_err(err)?;
    let zero = Tensor::new(vec![1], vec![0.0f64]).map_err(err)?;
    let hand = jaccard_loss_value(&one, &zero, 0.7).map_err(err)?;
    ensure((hand - JACCARD_HAND_VALUE).abs() <= JACCARD_HAND_TOL, || format!("jaccard(y=1, ŷ=0) = {hand}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for k in 0..METRIC_PAIRS {
        let (h, w) = (rng.random_range(1..=16), rng.random_range(1..=16));
        let (pa, pb) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let a: Vec<bool> = (0..h * w).map(|_| rng.random_bool(pa)).collect();
        let b: Vec<bool> = (0..h * w).map(|_| rng.random_bool(pb)).collect();
        let ta = Tensor::from_fn(vec![h, w], |i| a[i] as u8 as f64).map_err(err)?;
        let tb = Tensor::from_fn(vec![h, w], |i| b[i] as u8 as f64).map_err(err)?;

        let perfect = jaccard_loss_value(&ta, &ta, 0.7).map_err(err)?;
        ensure(perfect == 0.0, || format!("pair {k}: perfect prediction loss {perfect}"))?;

        let (mut both, mut na, mut nb, mut either) = (0usize, 0usize, 0usize, 0usize);
        for i in 0..h * w {
            both += (a[i] && b[i]) as usize;
            na += a[i] as usize;
            nb += b[i] as usize;
            either += (a[i] || b[i]) as usize;
        }
        let want_dice = if na + nb == 0 { 1.0 } else { 2.0 * both as f64 / (na + nb) as f64 };
        let want_iou = if either == 0 { 1.0 } else { both as f64 / either as f64 };
        let (d, j) = (dice(&ta, &tb).map_err(err)?, iou(&ta, &tb).map_err(err)?);
        ensure(d == want_dice && j == want_iou, || format!("pair {k}: dice {d} vs {want_dice}, iou {j} vs {want_iou}"))?;
        let gap = (j - d / (2.0 - d)).abs();
        worst = worst.max(gap);
        ensure(gap <= IOU_DICE_TOL, || format!("pair {k}: iou − dice/(2−dice) = {gap:e}"))?;
    }
    Ok(format!(
        "jaccard(y=1, ŷ=0) = {hand:.7}, {METRIC_PAIRS} mask pairs match brute force, max |iou − dice/(2−dice)| = {worst:.1e}"
    ))
}

fn overfit() -> Outcome {
    let cfg = TrainConfig {
        model: ModelConfig::tiny(),
        augment: AugmentConfig::disabled(),
        epochs: OVERFIT_MAX_STEPS as usize,
        batch_size: 8,
        target_size: 64,
        lr_max: OVERFIT_LR,
        lr_min: OVERFIT_LR,
        seed: 0,
        data: DataSource::Synthetic { n: 8, seed: 0 },
        ..TrainConfig::default()
    };
    ensure(cfg.model.filters == [8, 16, 24, 32] && cfg.model.stage_depths == [1; 4] && cfg.model.mu_count == 2, || {
        format!("tiny config drifted: {:?}", cfg.model)
    })?;
    let data = synth_polyp_dataset(8, 64, 0).map_err(err)?;
    let mut trainer = Trainer::new(cfg, data.clone()).map_err(err)?;
    let start = Instant::now();
    let mut best = 0.0f64;
    while trainer.step < OVERFIT_MAX_STEPS {
        trainer.train_step().map_err(err)?;
        let elapsed = start.elapsed();
        ensure(elapsed < OVERFIT_BUDGET, || format!("over budget after {} steps, best dice {best:.4}", trainer.step))?;
        if trainer.step % 10 == 0 {
            let dice = trainer.evaluate(&data).map_err(err)?.m_dice;
            best = best.max(dice);
            if dice >= OVERFIT_DICE {
                return Ok(format!("mean dice {dice:.4} ≥ {OVERFIT_DICE} after {} steps in {elapsed:.1?}", trainer.step));
            }
        }
    }
    Err(format!("mean dice {best:.4} < {OVERFIT_DICE} after {OVERFIT_MAX_STEPS} steps"))
}

fn ablation_plumbing() -> Outcome {
    let data = synth_polyp_dataset(2, 64, 5).map_err(err)?;
    let mut counts = Vec::new();
    for ab in Ablation::ALL {
        let cfg = TrainConfig {
            model: ModelConfig { image_size: (64, 64), ..ModelConfig::default() }.with_ablation(ab),
            augment: AugmentConfig::disabled(),
            epochs: 1,
            batch_size: 2,
            target_size: 64,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(cfg, data.clone()).map_err(err)?;
        let before = t.model.params.clone();
        let rec = t.train_step().map_err(|e| format!("{}: {e}", ab.label()))?;
        ensure(rec.loss.is_finite() && t.model.params != before, || format!("{}: step did not update", ab.label()))?;
        counts.push((ab, t.model.param_count()));
    }
    let count = |ab| counts.iter().find(|(a, _)| *a == ab).map(|(_, c)| *c).expect("all ablations ran");
    let base = count(Ablation::Baseline);
    let ups = [count(Ablation::OneUpsampling), count(Ablation::TwoUpsampling)];
    let mus = [count(Ablation::OneMu), count(Ablation::TwoMu)];
    let ordered = ups.iter().all(|&u| base <= u) && mus.iter().all(|&m| ups.iter().all(|&u| u <= m));
    let table = counts.iter().map(|(a, c)| format!("{} {c}", a.label())).collect::<Vec<_>>().join(", ");
    ensure(ordered, || format!("parameter counts out of order: {table}"))?;
    Ok(table)
}

fn determinism_and_resume() -> Outcome {
    let cfg = TrainConfig {
        model: ModelConfig::tiny(),
        epochs: 10,
        batch_size: 4,
        target_size: 64,
        lr_max: 1e-3,
        seed: 7,
        augment: AugmentConfig { seed: 11, ..AugmentConfig::default() },
        data: DataSource::Synthetic { n: 8, seed: 3 },
        ..TrainConfig::default()
    };
    let data = synth_polyp_dataset(8, 64, 3).map_err(err)?;
    let run = |steps: usize, t: &mut Trainer| -> Result<Vec<f64>, String> {
        (0..steps).map(|_| t.train_step().map(|r| r.loss).map_err(err)).collect()
    };

    let mut a = Trainer::new(cfg.clone(), data.clone()).map_err(err)?;
    let first_a = run(DETERMINISM_STEPS, &mut a)?;
    let rest_a = run(DETERMINISM_STEPS, &mut a)?;
    let mut b = Trainer::new(cfg.clone(), data.clone()).map_err(err)?;
    let first_b = run(DETERMINISM_STEPS, &mut b)?;
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    ensure(bits(&first_a) == bits(&first_b), || format!("two runs differ: {first_a:?} vs {first_b:?}"))?;

    let dir = tempfile::tempdir().map_err(err)?;
    let path = dir.path().join("mid.ckpt");
    b.checkpoint().save(&path).map_err(err)?;
    drop(b);
    let mut resumed = Trainer::resume(cfg, data, Checkpoint::load(&path).map_err(err)?).map_err(err)?;
    let rest_b = run(DETERMINISM_STEPS, &mut resumed)?;
    ensure(bits(&rest_a) == bits(&rest_b), || format!("resume diverged: {rest_a:?} vs {rest_b:?}"))?;
    Ok(format!("{DETERMINISM_STEPS} losses identical across runs, next {DETERMINISM_STEPS} identical after save/load/resume"))
}

fn ingestion() -> Outcome {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let golden = |name: String| -> Result<Tensor<f32>, String> {
        let text = std::fs::read_to_string(root.join("golden").join(&name)).map_err(|e| format!("{name}: {e}"))?;
        Tensor::from_text(&text).map_err(err)
    };
    let ids = ["fx_down", "fx_up"];
    for id in ids {
        let img = read_pnm(&root.join("images").join(format!("{id}.ppm"))).map_err(err)?;
        let mask = read_pnm(&root.join("masks").join(format!("{id}.pgm"))).map_err(err)?;
        let s = preprocess(id, &img, &mask, 32).map_err(err)?;
        let (gi, gm) = (golden(format!("{id}.image.txt"))?, golden(format!("{id}.mask.txt"))?);
        ensure(s.image.shape() == gi.shape() && bits(&s.image) == bits(&gi), || format!("{id}: image differs from golden"))?;
        ensure(s.mask.shape() == gm.shape() && bits(&s.mask) == bits(&gm), || format!("{id}: mask differs from golden"))?;
    }
    let (lo, hi) = (normalize(0.0), normalize(255.0));
    ensure(lo == -1.0 && hi == 1.0, || format!("endpoints map to {lo} and {hi}"))?;
    Ok(format!("{} fixtures bit-exact, 0 → {lo}, 255 → {hi}", ids.len()))
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("gradient suite", gradient_suite),
        ("shape law", shape_law),
        ("residual identity", residual_identity),
        ("loss and metric oracles", loss_metric_oracles),
        ("overfit smoke test", overfit),
        ("ablation plumbing", ablation_plumbing),
        ("determinism and resume", determinism_and_resume),
        ("ingestion", ingestion),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = f();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {} {name}: PASS ({detail}) [{secs:.1}s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({detail}) [{secs:.1}s]", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
