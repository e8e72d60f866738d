use std::fmt;
use std::str::FromStr;

use crate::engine::Activation;
use crate::error::{config_err, Error, Result};
use crate::kv::{read_array, KvConfig};

/// Token mixer used by an encoder stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageKind {
    /// ConvFormer layers.
    Conv,
    /// Transformer layers.
    Attn,
}

impl FromStr for StageKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "conv" => Ok(StageKind::Conv),
            "attn" => Ok(StageKind::Attn),
            other => config_err(format!("unknown stage kind `{other}` (expected conv or attn)")),
        }
    }
}

impl fmt::Display for StageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StageKind::Conv => "conv",
            StageKind::Attn => "attn",
        })
    }
}

/// What the decoder cross-links are made of.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MuMode {
    None,
    /// Nearest upsampling plus a 1×1 channel projection ("+Upsampling").
    PlainUpsample,
    /// Full multi-scale upsampling block.
    Mu,
}

impl FromStr for MuMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "none" => Ok(MuMode::None),
            "plain_upsample" => Ok(MuMode::PlainUpsample),
            "mu" => Ok(MuMode::Mu),
            other => config_err(format!("unknown mu_mode `{other}` (expected none, plain_upsample or mu)")),
        }
    }
}

impl fmt::Display for MuMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MuMode::None => "none",
            MuMode::PlainUpsample => "plain_upsample",
            MuMode::Mu => "mu",
        })
    }
}

/// The five rows of the MU ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    Baseline,
    OneUpsampling,
    OneMu,
    TwoUpsampling,
    TwoMu,
}

impl Ablation {
    pub const ALL: [Ablation; 5] =
        [Ablation::Baseline, Ablation::OneUpsampling, Ablation::OneMu, Ablation::TwoUpsampling, Ablation::TwoMu];

    pub fn label(self) -> &'static str {
        match self {
            Ablation::Baseline => "Baseline",
            Ablation::OneUpsampling => "+1 Upsampling",
            Ablation::OneMu => "+1 MU",
            Ablation::TwoUpsampling => "+2 Upsampling",
            Ablation::TwoMu => "+2 MU",
        }
    }

    pub fn links(self) -> (MuMode, usize) {
        match self {
            Ablation::Baseline => (MuMode::None, 0),
            Ablation::OneUpsampling => (MuMode::PlainUpsample, 1),
            Ablation::OneMu => (MuMode::Mu, 1),
            Ablation::TwoUpsampling => (MuMode::PlainUpsample, 2),
            Ablation::TwoMu => (MuMode::Mu, 2),
        }
    }
}

/// Everything that determines the network's structure.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// `(W, H)`; both divisible by 32.
    pub image_size: (usize, usize),
    pub in_channels: usize,
    pub filters: [usize; 4],
    pub stage_depths: [usize; 4],
    pub stage_kinds: [StageKind; 4],
    /// Attention heads per stage; only read for `attn` stages.
    pub heads: [usize; 4],
    /// Hidden expansion of the separable-convolution mixer.
    pub mixer_ratio: usize,
    pub mixer_kernel: usize,
    /// Hidden expansion of the channel MLP.
    pub mlp_ratio: usize,
    pub mu_mode: MuMode,
    /// Number of decoder cross-links: 1 enables the deepest link only.
    pub mu_count: usize,
    /// Channels of the two full-resolution decoder steps.
    pub head_channels: usize,
    /// Activation applied after each cross-link merge.
    pub mu_gate: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: (352, 352),
            in_channels: 3,
            filters: [64, 128, 320, 512],
            stage_depths: [2, 2, 2, 2],
            stage_kinds: [StageKind::Conv, StageKind::Conv, StageKind::Attn, StageKind::Attn],
            heads: [1, 2, 4, 8],
            mixer_ratio: 2,
            mixer_kernel: 7,
            mlp_ratio: 4,
            mu_mode: MuMode::Mu,
            mu_count: 2,
            head_channels: 64,
            mu_gate: Activation::Relu,
        }
    }
}

pub(crate) const MODEL_KEYS: &[&str] = &[
    "preset",
    "image_size",
    "in_channels",
    "filters",
    "stage_depths",
    "stage_kinds",
    "heads",
    "mixer_ratio",
    "mixer_kernel",
    "mlp_ratio",
    "mu_mode",
    "mu_count",
    "head_channels",
    "mu_gate",
];

impl ModelConfig {
    /// Desk-scale network: filters `[8,16,24,32]`, one layer per stage, 64×64 input.
    pub fn tiny() -> Self {
        ModelConfig {
            image_size: (64, 64),
            filters: [8, 16, 24, 32],
            stage_depths: [1, 1, 1, 1],
            head_channels: 8,
            ..Self::default()
        }
    }

    /// Smallest configuration used for full-model gradient checks.
    pub fn gradcheck() -> Self {
        ModelConfig {
            image_size: (32, 32),
            filters: [4, 4, 8, 8],
            stage_depths: [1, 1, 1, 1],
            head_channels: 4,
            ..Self::default()
        }
    }

    pub fn with_ablation(self, ablation: Ablation) -> Self {
        let (mu_mode, mu_count) = ablation.links();
        ModelConfig { mu_mode, mu_count, ..self }
    }

    pub fn width(&self) -> usize {
        self.image_size.0
    }

    pub fn height(&self) -> usize {
        self.image_size.1
    }

    /// Number of decoder cross-links actually built.
    pub fn links(&self) -> usize {
        match self.mu_mode {
            MuMode::None => 0,
            _ => self.mu_count,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (w, h) = self.image_size;
        if w == 0 || h == 0 || w % 32 != 0 || h % 32 != 0 {
            return config_err(format!("image_size {w}×{h}: W and H must be positive multiples of 32"));
        }
        if self.in_channels == 0 {
            return config_err("in_channels must be positive");
        }
        if self.filters.contains(&0) {
            return config_err(format!("filters {:?} must be positive", self.filters));
        }
        if self.filters.windows(2).any(|p| p[1] < p[0]) {
            return config_err(format!("filters {:?} must be non-decreasing", self.filters));
        }
        if self.stage_depths.contains(&0) {
            return config_err(format!("stage_depths {:?} must be positive", self.stage_depths));
        }
        for i in 0..4 {
            if self.stage_kinds[i] == StageKind::Attn && (self.heads[i] == 0 || !self.filters[i].is_multiple_of(self.heads[i])) {
                return config_err(format!(
                    "stage {}: {} heads do not divide {} channels",
                    i + 1,
                    self.heads[i],
                    self.filters[i]
                ));
            }
        }
        if self.mixer_ratio == 0 || self.mlp_ratio == 0 || self.head_channels == 0 {
            return config_err("mixer_ratio, mlp_ratio and head_channels must be positive");
        }
        if self.mixer_kernel.is_multiple_of(2) {
            return config_err(format!("mixer_kernel {} must be odd", self.mixer_kernel));
        }
        if self.mu_count > 2 {
            return config_err(format!("mu_count {} must be 0, 1 or 2", self.mu_count));
        }
        if self.mu_mode == MuMode::None && self.mu_count != 0 {
            return config_err("mu_mode = none requires mu_count = 0");
        }
        if self.mu_mode != MuMode::None && self.mu_count == 0 {
            return config_err(format!("mu_mode = {} requires mu_count 1 or 2", self.mu_mode));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        self.write_kv(&mut kv);
        kv
    }

    pub fn write_kv(&self, kv: &mut KvConfig) {
        kv.set_list("model.image_size", &[self.image_size.0, self.image_size.1]);
        kv.set("model.in_channels", self.in_channels);
        kv.set_list("model.filters", &self.filters);
        kv.set_list("model.stage_depths", &self.stage_depths);
        kv.set_list("model.stage_kinds", &self.stage_kinds);
        kv.set_list("model.heads", &self.heads);
        kv.set("model.mixer_ratio", self.mixer_ratio);
        kv.set("model.mixer_kernel", self.mixer_kernel);
        kv.set("model.mlp_ratio", self.mlp_ratio);
        kv.set("model.mu_mode", self.mu_mode);
        kv.set("model.mu_count", self.mu_count);
        kv.set("model.head_channels", self.head_channels);
        kv.set("model.mu_gate", self.mu_gate.name());
    }

    /// Reads `model.*` keys over a preset (`model.preset`, one of
    /// `default`, `tiny`, `gradcheck`) and validates the result.
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        kv.reject_unknown("model.", MODEL_KEYS)?;
        let mut cfg = match kv.get("model.preset") {
            None | Some("default") => ModelConfig::default(),
            Some("tiny") => ModelConfig::tiny(),
            Some("gradcheck") => ModelConfig::gradcheck(),
            Some(other) => return config_err(format!("unknown model.preset `{other}`")),
        };
        if let Some(sz) = kv.list::<usize>("model.image_size")? {
            cfg.image_size = match sz[..] {
                [s] => (s, s),
                [w, h] => (w, h),
                _ => return config_err("model.image_size takes `S` or `W,H`"),
            };
        }
        if let Some(v) = kv.parsed("model.in_channels")? {
            cfg.in_channels = v;
        }
        read_array(kv, "model.filters", &mut cfg.filters)?;
        read_array(kv, "model.stage_depths", &mut cfg.stage_depths)?;
        read_array(kv, "model.stage_kinds", &mut cfg.stage_kinds)?;
        read_array(kv, "model.heads", &mut cfg.heads)?;
        if let Some(v) = kv.parsed("model.mixer_ratio")? {
            cfg.mixer_ratio = v;
        }
        if let Some(v) = kv.parsed("model.mixer_kernel")? {
            cfg.mixer_kernel = v;
        }
        if let Some(v) = kv.parsed("model.mlp_ratio")? {
            cfg.mlp_ratio = v;
        }
        if let Some(v) = kv.parsed("model.mu_mode")? {
            cfg.mu_mode = v;
        }
        if let Some(v) = kv.parsed("model.mu_count")? {
            cfg.mu_count = v;
        }
        if let Some(v) = kv.parsed("model.head_channels")? {
            cfg.head_channels = v;
        }
        if let Some(v) = kv.parsed("model.mu_gate")? {
            cfg.mu_gate = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
        ModelConfig::gradcheck().validate().unwrap();
        for a in Ablation::ALL {
            ModelConfig::tiny().with_ablation(a).validate().unwrap();
        }
    }

    #[test]
    fn invalid_configs_name_the_violation() {
        let cases: Vec<(ModelConfig, &str)> = vec![
            (ModelConfig { image_size: (100, 96), ..ModelConfig::tiny() }, "multiples of 32"),
            (ModelConfig { filters: [16, 8, 24, 32], ..ModelConfig::tiny() }, "non-decreasing"),
            (ModelConfig { heads: [1, 2, 5, 8], ..ModelConfig::tiny() }, "heads"),
            (ModelConfig { mu_count: 3, ..ModelConfig::tiny() }, "mu_count"),
            (ModelConfig { mu_mode: MuMode::None, ..ModelConfig::tiny() }, "mu_count = 0"),
        ];
        for (cfg, needle) in cases {
            let err = cfg.validate().unwrap_err().to_string();
            assert!(err.contains(needle), "`{err}` should mention `{needle}`");
        }
    }

    #[test]
    fn kv_roundtrip() {
        let cfg = ModelConfig { image_size: (96, 64), ..ModelConfig::tiny().with_ablation(Ablation::OneUpsampling) };
        let text = cfg.to_kv().to_text();
        let back = ModelConfig::from_kv(&KvConfig::parse(&text).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn preset_is_the_base_for_overrides() {
        let kv = KvConfig::parse("model.preset = tiny\nmodel.mu_count = 1").unwrap();
        let cfg = ModelConfig::from_kv(&kv).unwrap();
        assert_eq!(cfg, ModelConfig { mu_count: 1, ..ModelConfig::tiny() });
        assert!(ModelConfig::from_kv(&KvConfig::parse("model.preset = huge").unwrap()).is_err());
    }

    #[test]
    fn unknown_model_key_is_rejected() {
        let kv = KvConfig::parse("model.filterz = 1,2,3,4").unwrap();
        assert!(ModelConfig::from_kv(&kv).is_err());
    }
}
