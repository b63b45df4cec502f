//! The four sub-networks: feature extractor, pixel-wise classifier, image
//! generator and 4-way patch discriminator, plus the reduced discriminator used
//! when adversarial training is moved into feature space.
//!
//! Each network owns a [`Layout`]; parameter values live in separate
//! [`ParamStore`]s so the same architecture can be evaluated in `f32` or `f64`
//! and frozen or trained per pass.

mod classifier;
mod discriminator;
mod extractor;
mod generator;
mod layers;

pub use classifier::Classifier;
pub use discriminator::{Discriminator, FeatureDiscriminator};
pub use extractor::{FeatureExtractor, FeaturePyramid};
pub use generator::Generator;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Layout, ParamStore};
use crate::tensor::Real;

/// Number of segmentation classes (background, lung, GGO, consolidation).
pub const NUM_CLASSES: usize = 4;
/// Number of pyramid levels produced by the extractor.
pub const NUM_LEVELS: usize = 5;
/// Spatial stride of the patch discriminator output.
pub const PATCH_STRIDE: usize = 8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub base_width: usize,
    /// Three 1-based pyramid levels fed to the generator, strictly increasing.
    pub feature_selection: [usize; 3],
    pub use_skip_connections: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self { base_width: 16, feature_selection: [3, 4, 5], use_skip_connections: true }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 {
            return Err(Error::Config("base_width must be positive".into()));
        }
        let s = self.feature_selection;
        if !(s[0] < s[1] && s[1] < s[2]) {
            return Err(Error::Config(format!("feature_selection {s:?} must be strictly increasing")));
        }
        if s[0] < 1 || s[2] > NUM_LEVELS {
            return Err(Error::Config(format!("feature_selection {s:?} references a missing level (1..=5)")));
        }
        Ok(())
    }

    /// Channel width of pyramid level `k` (0-based): C, 2C, 4C, 8C, 8C.
    pub fn level_width(&self, k: usize) -> usize {
        self.base_width << k.min(3)
    }
}

/// Checks that a slice batch is `[N, 1, H, W]` with `H`, `W` multiples of 16.
pub fn check_input(shape: [usize; 4]) -> Result<()> {
    let [n, c, h, w] = shape;
    if n == 0 || c != 1 || h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
        return Err(Error::Shape(format!("expected [N, 1, H, W] with H, W multiples of 16, got {shape:?}")));
    }
    Ok(())
}

/// All networks of one model. Which of them train depends on the run mode.
#[derive(Clone, Debug)]
pub struct Networks {
    pub config: NetConfig,
    pub extractor: FeatureExtractor,
    pub classifier: Classifier,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub feature_discriminator: FeatureDiscriminator,
}

impl Networks {
    pub fn new(config: &NetConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config: config.clone(),
            extractor: FeatureExtractor::new(config),
            classifier: Classifier::new(config),
            generator: Generator::new(config)?,
            discriminator: Discriminator::new(config),
            feature_discriminator: FeatureDiscriminator::new(config),
        })
    }
}

pub(crate) fn check_store<T: Real>(store: &ParamStore<T>, layout: &Layout, name: &str) -> Result<()> {
    if !store.matches(layout) {
        return Err(Error::Checkpoint(format!("{name} parameters do not match the network layout")));
    }
    Ok(())
}
