use std::path::PathBuf;

use crate::data::AugmentConfig;
use crate::error::{Error, Result};
use crate::kv::KvConfig;
use crate::model::ModelConfig;

/// Where training samples come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// A directory with `images/` and `masks/`.
    Dir(PathBuf),
    /// `n` synthetic samples generated at the target size.
    Synthetic { n: usize, seed: u64 },
}

/// Everything a training run needs. Read from `train.*`, `model.*` and
/// `aug.*` keys.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub augment: AugmentConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub target_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub seed: u64,
    pub data: DataSource,
    /// Directory for checkpoints and logs.
    pub out_dir: Option<PathBuf>,
    /// Checkpoint every this many epochs; zero writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let target_size = 64;
        TrainConfig {
            model: ModelConfig { image_size: (target_size, target_size), ..ModelConfig::default() },
            augment: AugmentConfig::default(),
            epochs: 158,
            batch_size: 4,
            target_size,
            lr_max: 1e-4,
            lr_min: 0.0,
            seed: 0,
            data: DataSource::Synthetic { n: 8, seed: 0 },
            out_dir: None,
            checkpoint_every: 0,
        }
    }
}

const TRAIN_KEYS: &[&str] = &[
    "epochs",
    "batch_size",
    "target_size",
    "lr_max",
    "lr_min",
    "seed",
    "data",
    "synth_n",
    "synth_seed",
    "out",
    "checkpoint_every",
    "augment",
];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("train.epochs and train.batch_size must be positive".into()));
        }
        if self.target_size == 0 || !self.target_size.is_multiple_of(32) {
            return Err(Error::Config(format!("train.target_size = {} must be a positive multiple of 32", self.target_size)));
        }
        if self.model.image_size != (self.target_size, self.target_size) {
            return Err(Error::Config(format!(
                "model.image_size {:?} disagrees with train.target_size {}",
                self.model.image_size, self.target_size
            )));
        }
        if !(self.lr_max > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr_max) {
            return Err(Error::Config(format!(
                "learning rates need 0 <= lr_min <= lr_max and lr_max > 0, got {} and {}",
                self.lr_min, self.lr_max
            )));
        }
        if let DataSource::Synthetic { n: 0, .. } = self.data {
            return Err(Error::Config("train.synth_n must be positive".into()));
        }
        self.model.validate()?;
        self.augment.validate()
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        kv.reject_foreign(&["train.", "model.", "aug."])?;
        kv.reject_unknown("train.", TRAIN_KEYS)?;
        let mut c = TrainConfig::default();
        if let Some(v) = kv.parsed("train.epochs")? {
            c.epochs = v;
        }
        if let Some(v) = kv.parsed("train.batch_size")? {
            c.batch_size = v;
        }
        if let Some(v) = kv.parsed("train.target_size")? {
            c.target_size = v;
        }
        if let Some(v) = kv.parsed("train.lr_max")? {
            c.lr_max = v;
        }
        if let Some(v) = kv.parsed("train.lr_min")? {
            c.lr_min = v;
        }
        if let Some(v) = kv.parsed("train.seed")? {
            c.seed = v;
        }
        if let Some(v) = kv.parsed("train.checkpoint_every")? {
            c.checkpoint_every = v;
        }
        c.out_dir = kv.get("train.out").map(PathBuf::from);
        c.data = match (kv.get("train.data"), kv.parsed::<usize>("train.synth_n")?) {
            (Some(_), Some(_)) => return Err(Error::Config("set either train.data or train.synth_n, not both".into())),
            (Some(dir), None) => DataSource::Dir(PathBuf::from(dir)),
            (None, n) => DataSource::Synthetic {
                n: n.unwrap_or(8),
                seed: kv.parsed("train.synth_seed")?.unwrap_or(0),
            },
        };

        let mut model_kv = kv.clone();
        if kv.get("model.image_size").is_none() {
            model_kv.set_list("model.image_size", &[c.target_size, c.target_size]);
        }
        c.model = ModelConfig::from_kv(&model_kv)?;
        c.augment = AugmentConfig::from_kv(kv)?;
        if !kv.parsed::<bool>("train.augment")?.unwrap_or(true) {
            c.augment = AugmentConfig { seed: c.augment.seed, ..AugmentConfig::disabled() };
        }
        c.validate()?;
        Ok(c)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(&KvConfig::parse(text)?)
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = self.model.to_kv();
        self.augment.write_kv(&mut kv);
        kv.set("train.epochs", self.epochs);
        kv.set("train.batch_size", self.batch_size);
        kv.set("train.target_size", self.target_size);
        kv.set("train.lr_max", self.lr_max);
        kv.set("train.lr_min", self.lr_min);
        kv.set("train.seed", self.seed);
        kv.set("train.checkpoint_every", self.checkpoint_every);
        match &self.data {
            DataSource::Dir(d) => kv.set("train.data", d.display()),
            DataSource::Synthetic { n, seed } => {
                kv.set("train.synth_n", n);
                kv.set("train.synth_seed", seed);
            }
        }
        if let Some(d) = &self.out_dir {
            kv.set("train.out", d.display());
        }
        kv
    }
}
