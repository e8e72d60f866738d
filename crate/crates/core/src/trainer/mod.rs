//! Training and evaluation loops.
//!
//! Optimizer step `s` belongs to epoch `s / steps_per_epoch`. Each epoch
//! visits the samples in a permutation drawn from `(seed, epoch)`, and
//! each sample is augmented from a stream keyed by
//! `(aug.seed, epoch, sample index)`. A run is therefore fully described
//! by its config and step counter, which is what a checkpoint stores.

mod checkpoint;
mod config;
mod optim;

pub use checkpoint::{Checkpoint, MAGIC, VERSION};
pub use config::{DataSource, TrainConfig};
pub use optim::{cosine_lr, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::{
    augment, image_tensor, load_dataset, probability_to_raw, resize_bilinear, synth_polyp_dataset, RawImage, Sample,
};
use crate::engine::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::metrics::{batch_jaccard_loss, MetricsReport, JACCARD_ALPHA};
use crate::model::{m2unet_forward, M2UNet};
use crate::rng::stream;

const SHUFFLE_STREAM: u64 = 1;
const AUGMENT_STREAM: u64 = 2;

/// Loss and learning rate of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    /// Zero-based step index.
    pub step: u64,
    /// One-based epoch.
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
}

impl EpochLog {
    pub fn tsv_header() -> &'static str {
        "epoch\tloss\tlr"
    }

    pub fn to_tsv(&self) -> String {
        format!("{}\t{:.6}\t{:.6e}", self.epoch, self.mean_loss, self.lr)
    }
}

/// Loads the configured dataset.
pub fn load_training_data(cfg: &TrainConfig) -> Result<Vec<Sample>> {
    match &cfg.data {
        DataSource::Dir(dir) => load_dataset(dir, cfg.target_size),
        DataSource::Synthetic { n, seed } => synth_polyp_dataset(*n, cfg.target_size, *seed),
    }
}

/// Stacks `[H,W,C]` tensors into `[N,H,W,C]`.
fn stack(items: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let mut shape = vec![items.len()];
    shape.extend_from_slice(items[0].shape());
    let data = items.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::new(shape, data)
}

fn check_sizes(samples: &[Sample], size: (usize, usize)) -> Result<()> {
    for s in samples {
        if (s.width(), s.height()) != size {
            return Err(Error::Usage(format!(
                "sample `{}` is {}×{}, the model expects {}×{}",
                s.id,
                s.width(),
                s.height(),
                size.0,
                size.1
            )));
        }
    }
    Ok(())
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: M2UNet<f32>,
    pub optim: AdamState<f32>,
    /// Optimizer steps completed.
    pub step: u64,
    data: Vec<Sample>,
}

impl Trainer {
    /// A fresh run with parameters initialized from `config.seed`.
    pub fn new(config: TrainConfig, data: Vec<Sample>) -> Result<Self> {
        config.validate()?;
        let model = M2UNet::new(&config.model, config.seed)?;
        Self::assemble(config, model, AdamState::new(), 0, data)
    }

    /// Continues the run captured in `ckpt`.
    pub fn resume(config: TrainConfig, data: Vec<Sample>, ckpt: Checkpoint) -> Result<Self> {
        config.validate()?;
        if ckpt.config != config.model {
            return Err(Error::Usage("checkpoint model config differs from the training config".into()));
        }
        let optim = ckpt.optim.unwrap_or_default();
        let model = M2UNet { config: ckpt.config, params: ckpt.params };
        Self::assemble(config, model, optim, ckpt.step, data)
    }

    fn assemble(config: TrainConfig, model: M2UNet<f32>, optim: AdamState<f32>, step: u64, data: Vec<Sample>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Usage("training dataset is empty".into()));
        }
        check_sizes(&data, config.model.image_size)?;
        Ok(Trainer { config, model, optim, step, data })
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.data.len().div_ceil(self.config.batch_size) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.config.epochs as u64 * self.steps_per_epoch()
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps()
    }

    /// Sample indices of the batch taken at `step`.
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let spe = self.steps_per_epoch();
        let (epoch, b) = (step / spe, (step % spe) as usize);
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        order.shuffle(&mut stream(self.config.seed, &[SHUFFLE_STREAM, epoch]));
        let bs = self.config.batch_size;
        order[b * bs..((b + 1) * bs).min(order.len())].to_vec()
    }

    fn prepared(&self, epoch: u64, index: usize) -> Result<Sample> {
        let mut rng = stream(self.config.augment.seed, &[AUGMENT_STREAM, epoch, index as u64]);
        let donor = rng.random_range(0..self.data.len());
        augment(&self.data[index], Some(&self.data[donor]), &self.config.augment, &mut rng)
    }

    /// Runs one optimizer step.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        if self.is_done() {
            return Err(Error::Usage(format!("training already finished after {} steps", self.step)));
        }
        let step = self.step;
        let epoch = step / self.steps_per_epoch();
        let batch: Vec<Sample> =
            self.batch_indices(step).into_iter().map(|i| self.prepared(epoch, i)).collect::<Result<_>>()?;
        let images = stack(&batch.iter().map(|s| &s.image).collect::<Vec<_>>())?;
        let masks = stack(&batch.iter().map(|s| &s.mask).collect::<Vec<_>>())?;

        let mut g = Graph::new();
        let p = self.model.params.bind(&mut g, true);
        let x = g.constant(images);
        let y = g.constant(masks);
        let probs = m2unet_forward(&mut g, x, &p, &self.model.config)?;
        let loss_var = batch_jaccard_loss(&mut g, y, probs, JACCARD_ALPHA)?;
        let loss = g.value(loss_var).item()? as f64;
        let grads = p.collect_grads(&g.backward(loss_var)?);
        drop(g);

        let lr = cosine_lr(step, self.total_steps(), self.config.lr_max, self.config.lr_min)?;
        self.optim.step(&mut self.model.params, &grads, lr)?;
        self.step += 1;
        Ok(StepRecord { step, epoch: epoch as usize + 1, loss, lr })
    }

    /// Runs steps until the current epoch ends.
    pub fn train_epoch(&mut self) -> Result<EpochLog> {
        let spe = self.steps_per_epoch();
        let mut losses = Vec::new();
        let rec = loop {
            let rec = self.train_step()?;
            losses.push(rec.loss);
            if self.step.is_multiple_of(spe) {
                break rec;
            }
        };
        Ok(EpochLog { epoch: rec.epoch, mean_loss: losses.iter().sum::<f64>() / losses.len() as f64, lr: rec.lr })
    }

    /// Trains to the end, writing checkpoints and the epoch log under
    /// `config.out_dir` when set. `on_epoch` sees every finished epoch.
    pub fn run(&mut self, mut on_epoch: impl FnMut(&EpochLog)) -> Result<Vec<EpochLog>> {
        let out = self.config.out_dir.clone();
        if let Some(dir) = &out {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("config.txt"), self.config.to_kv().to_text())?;
        }
        let mut logs = Vec::new();
        while !self.is_done() {
            let log = self.train_epoch().map_err(|e| self.annotate(e))?;
            on_epoch(&log);
            logs.push(log);
            if let Some(dir) = &out {
                let mut text = String::from(EpochLog::tsv_header());
                text.push('\n');
                for l in &logs {
                    text.push_str(&l.to_tsv());
                    text.push('\n');
                }
                fs::write(dir.join("log.tsv"), text)?;
                let k = self.config.checkpoint_every;
                if k > 0 && log.epoch % k == 0 {
                    self.checkpoint().save(&dir.join(format!("epoch_{:04}.ckpt", log.epoch)))?;
                }
            }
        }
        if let Some(dir) = &out {
            self.checkpoint().save(&dir.join("final.ckpt"))?;
        }
        Ok(logs)
    }

    fn annotate(&self, e: Error) -> Error {
        match e {
            Error::NonFinite { op } => {
                Error::Usage(format!("training aborted at step {}: non-finite value produced by `{op}`", self.step))
            }
            other => other,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.model.config.clone(),
            step: self.step,
            params: self.model.params.clone(),
            optim: Some(self.optim.clone()),
        }
    }

    pub fn evaluate(&self, samples: &[Sample]) -> Result<MetricsReport> {
        evaluate(&self.model, samples)
    }
}

/// Scores `model` on `samples` without augmentation.
pub fn evaluate(model: &M2UNet<f32>, samples: &[Sample]) -> Result<MetricsReport> {
    check_sizes(samples, model.config.image_size)?;
    let mut preds = Vec::with_capacity(samples.len());
    for s in samples {
        let p = model.predict(&stack(&[&s.image])?)?;
        preds.push(p.reshape(s.mask.shape().to_vec())?);
    }
    MetricsReport::from_predictions(samples.iter().zip(&preds).map(|(s, p)| (s.id.as_str(), &s.mask, p)))
}

/// Segments one raw RGB image and returns an 8-bit probability map at the
/// image's original size.
pub fn predict_image(model: &M2UNet<f32>, image: &RawImage) -> Result<RawImage> {
    let (w, h) = model.config.image_size;
    if w != h {
        return Err(Error::Usage(format!("prediction needs a square model, got {w}×{h}")));
    }
    let x = image_tensor("input", image, w)?;
    let p = model.predict(&stack(&[&x])?)?.reshape(vec![h, w, 1])?;
    let small = probability_to_raw(&p)?;
    let px = resize_bilinear(&small, image.width, image.height).into_iter().map(|v| v.round() as u8).collect();
    RawImage::new(image.width, image.height, 1, px)
}

/// Loads a checkpoint and scores it on a dataset directory.
pub fn evaluate_checkpoint(ckpt: &Path, data: &Path) -> Result<MetricsReport> {
    let ck = Checkpoint::load(ckpt)?;
    let (w, h) = ck.config.image_size;
    if w != h {
        return Err(Error::Usage(format!("evaluation needs a square model, checkpoint is {w}×{h}")));
    }
    let samples = load_dataset(data, w)?;
    evaluate(&M2UNet { config: ck.config, params: ck.params }, &samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::AugmentConfig;
    use crate::model::ModelConfig;

    fn small_config() -> TrainConfig {
        TrainConfig {
            model: ModelConfig { image_size: (32, 32), ..ModelConfig::gradcheck() },
            target_size: 32,
            epochs: 2,
            batch_size: 3,
            lr_max: 1e-3,
            data: DataSource::Synthetic { n: 5, seed: 1 },
            ..TrainConfig::default()
        }
    }

    fn trainer(cfg: TrainConfig) -> Trainer {
        let data = load_training_data(&cfg).unwrap();
        Trainer::new(cfg, data).unwrap()
    }

    #[test]
    fn batches_cover_each_epoch_once() {
        let t = trainer(small_config());
        assert_eq!(t.steps_per_epoch(), 2);
        assert_eq!(t.total_steps(), 4);
        for epoch in 0..2 {
            let mut seen: Vec<usize> = (0..2).flat_map(|b| t.batch_indices(epoch * 2 + b)).collect();
            seen.sort();
            assert_eq!(seen, vec![0, 1, 2, 3, 4]);
        }
        assert_ne!(t.batch_indices(0), t.batch_indices(2));
    }

    #[test]
    fn empty_dataset_is_a_usage_error() {
        assert!(matches!(Trainer::new(small_config(), vec![]), Err(Error::Usage(_))));
    }

    #[test]
    fn mismatched_sample_size_is_a_usage_error() {
        let cfg = small_config();
        let data = synth_polyp_dataset(2, 64, 0).unwrap();
        assert!(matches!(Trainer::new(cfg, data), Err(Error::Usage(_))));
    }

    #[test]
    fn run_stops_after_the_configured_epochs() {
        let mut t = trainer(small_config());
        let logs = t.run(|_| {}).unwrap();
        assert_eq!(logs.len(), 2);
        assert_eq!(t.step, 4);
        assert!(matches!(t.train_step(), Err(Error::Usage(_))));
        let last = cosine_lr(3, 4, 1e-3, 0.0).unwrap();
        assert_eq!(logs[1].lr, last);
        assert!(logs[0].lr > logs[1].lr);
        assert!(logs.iter().all(|l| l.mean_loss.is_finite() && l.mean_loss >= 0.0));
    }

    #[test]
    fn non_finite_weights_abort_with_the_op_name() {
        let mut t = trainer(TrainConfig { augment: AugmentConfig::disabled(), ..small_config() });
        t.model.params.get_mut("enc.stem.w").unwrap().data_mut()[0] = f32::NAN;
        let err = t.run(|_| {}).unwrap_err().to_string();
        assert!(err.contains("non-finite") && err.contains("conv2d"), "{err}");
    }

    #[test]
    fn oracle_and_constant_predictions_score_as_expected() {
        let samples = synth_polyp_dataset(3, 32, 2).unwrap();
        let perfect = MetricsReport::from_predictions(samples.iter().map(|s| (s.id.as_str(), &s.mask, &s.mask))).unwrap();
        assert_eq!((perfect.m_dice, perfect.m_iou, perfect.mae), (1.0, 1.0, 0.0));
        let half: Vec<Tensor<f32>> = samples.iter().map(|s| Tensor::full(s.mask.shape().to_vec(), 0.5).unwrap()).collect();
        let r = MetricsReport::from_predictions(samples.iter().zip(&half).map(|(s, p)| (s.id.as_str(), &s.mask, p))).unwrap();
        assert!((r.mae - 0.5).abs() < 1e-12);
        assert_eq!(r.to_tsv().lines().count(), samples.len() + 2);
    }

    #[test]
    fn prediction_matches_the_input_size() {
        let t = trainer(small_config());
        let raw = RawImage::new(45, 20, 3, (0..45 * 20 * 3).map(|i| (i % 251) as u8).collect()).unwrap();
        let p = predict_image(&t.model, &raw).unwrap();
        assert_eq!((p.width, p.height, p.channels), (45, 20, 1));
    }

    #[test]
    fn evaluate_rejects_wrong_sizes() {
        let t = trainer(small_config());
        let other = synth_polyp_dataset(1, 64, 0).unwrap();
        assert!(matches!(t.evaluate(&other), Err(Error::Usage(_))));
    }
}
