//! Alternating optimization: per iteration one generator step, one
//! discriminator step, then one joint extractor/classifier step, each with its
//! own Adam state and a shared step-decayed learning rate.

mod checkpoint;
mod objectives;
mod run;
mod state;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use objectives::{
    discriminator_objective, extractor_objective, generator_objective, ModelParams, Net, Objective,
};
pub use run::{read_log, run, sample_batch, Batch, RunSummary, TrainData};
pub use state::{GeneratorOutput, TrainState, Trainer};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::NetConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    /// Segmentation loss only; no generator or discriminator updates.
    SourceOnly,
    /// Full method without classifier skip connections.
    NoSkip,
    /// Adversarial alignment on the deepest feature map instead of reconstructions.
    FeatureSpace,
    /// Supervised on target annotations; the ceiling.
    TargetOnly,
}

impl Ablation {
    pub const ALL: [Ablation; 5] =
        [Ablation::Full, Ablation::SourceOnly, Ablation::NoSkip, Ablation::FeatureSpace, Ablation::TargetOnly];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::SourceOnly => "source_only",
            Ablation::NoSkip => "no_skip",
            Ablation::FeatureSpace => "feature_space",
            Ablation::TargetOnly => "target_only",
        }
    }

    /// Uses the image generator and image discriminator.
    pub fn image_space(self) -> bool {
        matches!(self, Ablation::Full | Ablation::NoSkip)
    }

    /// Has any adversarial pathway.
    pub fn adversarial(self) -> bool {
        self.image_space() || self == Ablation::FeatureSpace
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation mode {s:?}")))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunPaths {
    pub source: Option<String>,
    pub target_train: Option<String>,
    /// Target-train annotations, read only in `target_only` mode.
    pub target_oracle: Option<String>,
    pub out: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub iterations: u64,
    pub lr0: f64,
    /// Multiplier applied every `lr_decay_every` iterations.
    pub lr_decay: f64,
    pub lr_decay_every: u64,
    pub alpha: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub image_size: usize,
    pub net: NetConfig,
    pub ablation: Ablation,
    /// Zero disables periodic checkpoints; the final one is always written.
    pub checkpoint_every: u64,
    pub augment: bool,
    pub paths: RunPaths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// Full-scale settings: 512x512 slices, C=64, 100k iterations at 1e-5.
    pub fn paper() -> Self {
        Self {
            iterations: 100_000,
            lr0: 1e-5,
            lr_decay: 0.8,
            lr_decay_every: 10_000,
            alpha: 0.1,
            batch_size: 1,
            seed: 0,
            image_size: 512,
            net: NetConfig { base_width: 64, ..NetConfig::default() },
            ablation: Ablation::Full,
            checkpoint_every: 10_000,
            augment: true,
            paths: RunPaths::default(),
        }
    }

    /// CPU-scale settings: 128x128 slices, C=16, 2000 iterations.
    pub fn desk() -> Self {
        Self {
            iterations: 2_000,
            lr0: DESK_LR,
            alpha: DESK_ALPHA,
            image_size: 128,
            net: NetConfig::default(),
            checkpoint_every: 500,
            ..Self::paper()
        }
    }

    /// Applies the mode's structural settings: `source_only` zeroes alpha and
    /// `no_skip` drops the classifier skips.
    pub fn for_mode(mut self, mode: Ablation) -> Self {
        self.ablation = mode;
        if mode == Ablation::SourceOnly {
            self.alpha = 0.0;
        }
        if mode == Ablation::NoSkip {
            self.net.use_skip_connections = false;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 must be > 0, got {}", self.lr0)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) || self.lr_decay_every == 0 {
            return Err(Error::Config("lr_decay must lie in (0, 1] and lr_decay_every be positive".into()));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        crate::phantom::check_dims(self.image_size, self.image_size).map_err(|e| Error::Config(e.to_string()))?;
        match self.ablation {
            Ablation::SourceOnly if self.alpha != 0.0 => Err(Error::Config(format!(
                "source_only requires alpha = 0 (got {}); it is the unadapted baseline",
                self.alpha
            ))),
            m if m.adversarial() && self.alpha == 0.0 => Err(Error::Config(format!(
                "alpha = 0 disables adaptation; use ablation source_only instead of {}",
                m.name()
            ))),
            Ablation::NoSkip if self.net.use_skip_connections => {
                Err(Error::Config("no_skip requires net.use_skip_connections = false".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Initial learning rate of the desk preset. Far fewer iterations than the
/// full-scale schedule, so steps are larger.
pub const DESK_LR: f64 = 2e-4;

/// Cross-domain weight of the desk preset: 0.1 scaled by the 64 pixels per
/// discriminator cell. The losses are means, so this restores the balance
/// between pixel terms and patch terms that 0.1 has when both are sums.
pub const DESK_ALPHA: f64 = 0.1 / 64.0;

/// `lr0 * lr_decay^floor(iter / lr_decay_every)`.
pub fn lr_at(iter: u64, cfg: &RunConfig) -> f64 {
    let k = (iter / cfg.lr_decay_every.max(1)) as i32;
    cfg.lr0 * cfg.lr_decay.powi(k)
}
