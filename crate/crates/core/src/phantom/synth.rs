use serde::{Deserialize, Serialize};

use super::{apply_domain_shift, derive_seed, generate_source_sample, Dataset, PhantomSpec, Role, Sample, ShiftParams};
use crate::error::{Error, Result};

const SOURCE_STREAM: u64 = 10;
const TARGET_STREAM: u64 = 20;
const SHIFT_STREAM: u64 = 21;
const JITTER_STREAM: u64 = 22;

/// Settings for building the source, target-train and target-test sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub seed: u64,
    pub phantom: PhantomSpec,
    /// Mean target-domain shift.
    pub shift: ShiftParams,
    /// Relative per-patient perturbation of the shift (scanner variation).
    pub shift_jitter: f64,
    pub source_slices: usize,
    pub source_patients: usize,
    pub target_patients: usize,
    pub slices_per_patient: usize,
    pub train_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            phantom: PhantomSpec::default(),
            shift: default_target_shift(),
            shift_jitter: 0.1,
            source_slices: 400,
            source_patients: 20,
            target_patients: 10,
            slices_per_patient: 40,
            train_fraction: 0.7,
        }
    }
}

/// Darker, lower-contrast, noisier target with a smooth bias field.
pub fn default_target_shift() -> ShiftParams {
    ShiftParams { intensity_bias: 0.05, contrast_gain: 1.0, gamma: 1.7, noise_std: 0.03, texture_warp_amplitude: 0.15 }
}

/// The three datasets plus the withheld target-train annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct DataBundle {
    pub source: Dataset,
    pub target_train: Dataset,
    pub target_oracle: Dataset,
    pub target_test: Dataset,
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.shift.validate()?;
        if !(0.0..1.0).contains(&self.shift_jitter) {
            return Err(Error::Config(format!("shift_jitter must lie in [0, 1), got {}", self.shift_jitter)));
        }
        if self.source_slices == 0 || self.source_patients == 0 || self.slices_per_patient == 0 {
            return Err(Error::Config("source_slices, source_patients and slices_per_patient must be positive".into()));
        }
        if self.target_patients < 2 {
            return Err(Error::Split("target_patients must be at least 2 for a patient-level split".into()));
        }
        Ok(())
    }

    fn patient_shift(&self, patient: usize) -> ShiftParams {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(self.seed, JITTER_STREAM, patient as u64));
        let j = self.shift_jitter;
        let mut jitter = |v: f64| if j > 0.0 { v * (1.0 + rng.random_range(-j..=j)) } else { v };
        let s = &self.shift;
        ShiftParams {
            intensity_bias: jitter(s.intensity_bias),
            contrast_gain: jitter(s.contrast_gain),
            gamma: jitter(s.gamma),
            noise_std: jitter(s.noise_std),
            texture_warp_amplitude: jitter(s.texture_warp_amplitude),
        }
    }
}

pub fn build_datasets(cfg: &DataConfig) -> Result<DataBundle> {
    cfg.validate()?;
    let mut source = Vec::with_capacity(cfg.source_slices);
    for i in 0..cfg.source_slices {
        let (slice, mask) = generate_source_sample(&cfg.phantom, derive_seed(cfg.seed, SOURCE_STREAM, i as u64))?;
        let patient_id = format!("src-{:03}", i % cfg.source_patients);
        source.push(Sample { slice, mask: Some(mask), patient_id });
    }
    let mut target = Vec::with_capacity(cfg.target_patients * cfg.slices_per_patient);
    for p in 0..cfg.target_patients {
        let shift = cfg.patient_shift(p);
        for k in 0..cfg.slices_per_patient {
            let idx = (p * cfg.slices_per_patient + k) as u64;
            let (x, mask) = generate_source_sample(&cfg.phantom, derive_seed(cfg.seed, TARGET_STREAM, idx))?;
            let slice = apply_domain_shift(&x, &shift, derive_seed(cfg.seed, SHIFT_STREAM, idx))?;
            target.push(Sample { slice, mask: Some(mask), patient_id: format!("tgt-{p:03}") });
        }
    }
    let all = Dataset { role: Role::TargetTest, seed: cfg.seed, samples: target };
    let (train, test) = all.split(cfg.train_fraction)?;
    Ok(DataBundle {
        source: Dataset { role: Role::Source, seed: cfg.seed, samples: source },
        target_train: train.unlabeled(),
        target_oracle: train.with_role(Role::TargetOracle),
        target_test: test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DataConfig {
        DataConfig {
            phantom: PhantomSpec { image_size: 32, ..Default::default() },
            source_slices: 6,
            target_patients: 10,
            slices_per_patient: 2,
            ..Default::default()
        }
    }

    #[test]
    fn bundle_roles_and_split() {
        let b = build_datasets(&small()).unwrap();
        assert_eq!(b.source.len(), 6);
        assert_eq!(b.target_train.patients().len(), 7);
        assert_eq!(b.target_test.patients().len(), 3);
        assert!(b.target_train.samples.iter().all(|s| s.mask.is_none()));
        assert!(b.target_test.samples.iter().all(|s| s.mask.is_some()));
        assert!(b.target_train.patients().is_disjoint(&b.target_test.patients()));
        let slices: Vec<_> = b.target_oracle.samples.iter().map(|s| &s.slice).collect();
        assert_eq!(slices, b.target_train.samples.iter().map(|s| &s.slice).collect::<Vec<_>>());
    }

    #[test]
    fn deterministic() {
        assert_eq!(build_datasets(&small()).unwrap(), build_datasets(&small()).unwrap());
    }
}
