use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Slice, WaveField};
use crate::error::{Error, Result};

/// Intensity shift from the source to the target domain:
/// `clip(gain * (v * (1 + warp * field))^gamma + bias + noise)`, where `field`
/// is a smooth random field in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShiftParams {
    pub intensity_bias: f64,
    pub contrast_gain: f64,
    pub gamma: f64,
    pub noise_std: f64,
    pub texture_warp_amplitude: f64,
}

impl Default for ShiftParams {
    fn default() -> Self {
        Self::identity()
    }
}

impl ShiftParams {
    pub fn identity() -> Self {
        Self { intensity_bias: 0.0, contrast_gain: 1.0, gamma: 1.0, noise_std: 0.0, texture_warp_amplitude: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidSpec(format!("gamma must be finite and > 0, got {}", self.gamma)));
        }
        for (name, v) in [("noise_std", self.noise_std), ("texture_warp_amplitude", self.texture_warp_amplitude)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidSpec(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !self.intensity_bias.is_finite() || !self.contrast_gain.is_finite() {
            return Err(Error::InvalidSpec("intensity_bias and contrast_gain must be finite".into()));
        }
        Ok(())
    }
}

pub fn apply_domain_shift(x: &Slice, p: &ShiftParams, seed: u64) -> Result<Slice> {
    p.validate()?;
    let (h, w) = (x.height(), x.width());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let field = (p.texture_warp_amplitude > 0.0).then(|| WaveField::new(&mut rng, 4, 4.0));
    let noise = (p.noise_std > 0.0).then(|| rand_distr::Normal::new(0.0, p.noise_std).expect("finite std"));
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let mut v = x.at(r, c) as f64;
            if let Some(f) = &field {
                v *= 1.0 + p.texture_warp_amplitude * f.at((c as f64 + 0.5) / w as f64, (r as f64 + 0.5) / h as f64);
                v = v.max(0.0);
            }
            if p.gamma != 1.0 {
                v = v.powf(p.gamma);
            }
            v = p.contrast_gain * v + p.intensity_bias;
            if let Some(n) = noise {
                v += rng.sample(n);
            }
            out.push(v as f32);
        }
    }
    Ok(Slice::from_raw(h, w, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checkerboard() -> Slice {
        let px = (0..32 * 32).map(|i| if (i / 32 + i % 32) % 2 == 0 { 0.3 } else { 0.8 }).collect();
        Slice::new(32, 32, px).unwrap()
    }

    #[test]
    fn identity_is_exact() {
        let (x, _) = super::super::generate_source_sample(&Default::default(), 5).unwrap();
        for seed in [0, 1, 99] {
            assert_eq!(apply_domain_shift(&x, &ShiftParams::identity(), seed).unwrap(), x);
        }
    }

    #[test]
    fn additive_bias() {
        let x = Slice::filled(16, 16, 0.5).unwrap();
        let p = ShiftParams { intensity_bias: 0.2, ..ShiftParams::identity() };
        let y = apply_domain_shift(&x, &p, 0).unwrap();
        assert!(y.pixels().iter().all(|&v| (v - 0.7).abs() < 1e-6));
    }

    #[test]
    fn gamma_squares_pixels() {
        let x = checkerboard();
        let p = ShiftParams { gamma: 2.0, ..ShiftParams::identity() };
        let y = apply_domain_shift(&x, &p, 0).unwrap();
        for (a, b) in x.pixels().iter().zip(y.pixels()) {
            assert!((((*a as f64) * (*a as f64)) as f32 - b).abs() < 1e-6);
        }
    }

    #[test]
    fn output_clipped_and_monotone_in_bias() {
        let x = checkerboard();
        let base = ShiftParams { contrast_gain: 1.4, gamma: 0.7, texture_warp_amplitude: 0.3, ..ShiftParams::identity() };
        let mut prev: Option<Slice> = None;
        for bias in [-0.6, -0.2, 0.0, 0.1, 0.5] {
            let y = apply_domain_shift(&x, &ShiftParams { intensity_bias: bias, ..base.clone() }, 4).unwrap();
            assert!(y.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
            if let Some(p) = &prev {
                assert!(p.pixels().iter().zip(y.pixels()).all(|(a, b)| a <= b));
            }
            prev = Some(y);
        }
    }

    #[test]
    fn invalid_gamma_rejected() {
        let x = checkerboard();
        for g in [0.0, -1.0, f64::NAN] {
            let p = ShiftParams { gamma: g, ..ShiftParams::identity() };
            assert!(matches!(apply_domain_shift(&x, &p, 0), Err(Error::InvalidSpec(_))));
        }
    }
}
