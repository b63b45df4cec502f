//! Procedural lung phantoms standing in for annotated CT slices, the intensity
//! shift that turns them into a target domain, augmentation, and the on-disk
//! dataset format.

mod augment;
mod dataset;
mod shift;
mod synth;

pub use augment::{augment, augment_unlabeled, augment_with, AugmentDraw, AUG_GAMMA_RANGE, MAX_ROTATION_DEG, MAX_SHEAR};
pub use dataset::{
    load_dataset, partition_patients, read_manifest, save_dataset, split_patient_level, Dataset, DatasetManifest,
    ManifestEntry, Role, Sample, DTYPE_F32, DTYPE_U8, HEADER_BYTES,
};
pub use shift::{apply_domain_shift, ShiftParams};
pub use synth::{build_datasets, default_target_shift, DataBundle, DataConfig};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BACKGROUND: u8 = 0;
pub const LUNG: u8 = 1;
pub const GGO: u8 = 2;
pub const CONSOLIDATION: u8 = 3;

/// Single-channel image, row-major, intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Slice {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl Slice {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        check_dims(height, width)?;
        if pixels.len() != height * width {
            return Err(Error::Shape(format!("{} pixels for a {height}x{width} slice", pixels.len())));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Shape(format!("slice intensity {v} outside [0, 1]")));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.width + col]
    }

    /// `[1, 1, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec([1, 1, self.height, self.width], self.pixels.clone()).expect("slice shape")
    }

    /// Clamps into `[0, 1]` (NaN becomes 0).
    pub(crate) fn from_raw(height: usize, width: usize, mut pixels: Vec<f32>) -> Self {
        for v in &mut pixels {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self { height, width, pixels }
    }
}

/// Per-pixel class ids: 0 background, 1 lung, 2 GGO, 3 consolidation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegMask {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl SegMask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Shape(format!("{} labels for a {height}x{width} mask", labels.len())));
        }
        if let Some(l) = labels.iter().find(|&&l| l > CONSOLIDATION) {
            return Err(Error::Shape(format!("mask label {l} outside 0..=3")));
        }
        Ok(Self { height, width, labels })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn at(&self, row: usize, col: usize) -> u8 {
        self.labels[row * self.width + col]
    }

    /// Pixel count per class.
    pub fn class_counts(&self) -> [usize; 4] {
        let mut c = [0; 4];
        for &l in &self.labels {
            c[l as usize] += 1;
        }
        c
    }
}

pub(crate) fn check_dims(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 || height % 16 != 0 || width % 16 != 0 {
        return Err(Error::InvalidSpec(format!("image size {height}x{width} must be a positive multiple of 16")));
    }
    Ok(())
}

pub(crate) fn check_pair(x: &Slice, m: &SegMask) -> Result<()> {
    if (x.height, x.width) != (m.height, m.width) {
        return Err(Error::Shape(format!(
            "slice {}x{} paired with mask {}x{}",
            x.height, x.width, m.height, m.width
        )));
    }
    Ok(())
}

/// Phantom generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub image_size: usize,
    pub lung_count: usize,
    /// Inclusive range of infection blobs per slice.
    pub infection_blob_count_range: [usize; 2],
    pub lung_intensity_band: [f64; 2],
    pub ggo_intensity_band: [f64; 2],
    pub consolidation_intensity_band: [f64; 2],
    pub background_intensity_band: [f64; 2],
    /// Amplitude of the smooth texture added to every region.
    pub background_texture_scale: f64,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise_std: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            image_size: 128,
            lung_count: 2,
            infection_blob_count_range: [1, 5],
            lung_intensity_band: [0.1, 0.2],
            ggo_intensity_band: [0.35, 0.45],
            consolidation_intensity_band: [0.6, 0.7],
            background_intensity_band: [0.8, 0.9],
            background_texture_scale: 0.02,
            noise_std: 0.01,
        }
    }
}

/// Minimum gap between neighbouring intensity bands.
pub const BAND_MARGIN: f64 = 0.05;

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        check_dims(self.image_size, self.image_size)?;
        if self.lung_count != 2 {
            return Err(Error::InvalidSpec(format!("lung_count must be 2, got {}", self.lung_count)));
        }
        let [lo, hi] = self.infection_blob_count_range;
        if lo == 0 || lo > hi {
            return Err(Error::InvalidSpec(format!("infection_blob_count_range [{lo}, {hi}] must satisfy 1 <= lo <= hi")));
        }
        let bands = [
            ("lung", self.lung_intensity_band),
            ("ggo", self.ggo_intensity_band),
            ("consolidation", self.consolidation_intensity_band),
            ("background", self.background_intensity_band),
        ];
        for (name, [a, b]) in bands {
            if !(0.0..=1.0).contains(&a) || !(0.0..=1.0).contains(&b) || a > b {
                return Err(Error::InvalidSpec(format!("{name} band [{a}, {b}] must be an ordered sub-interval of [0, 1]")));
            }
        }
        for w in bands.windows(2) {
            let ((n0, b0), (n1, b1)) = (w[0], w[1]);
            if b1[0] - b0[1] < BAND_MARGIN - 1e-12 {
                return Err(Error::InvalidSpec(format!(
                    "{n0} band {b0:?} and {n1} band {b1:?} must be ordered and separated by at least {BAND_MARGIN}"
                )));
            }
        }
        for (name, v) in [("background_texture_scale", self.background_texture_scale), ("noise_std", self.noise_std)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidSpec(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Stream-separated seed derivation (splitmix64 finalizer).
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = ((x - self.cx) / self.rx, (y - self.cy) / self.ry);
        dx * dx + dy * dy <= 1.0
    }

    fn scaled(&self, s: f64) -> Self {
        Self { rx: self.rx * s, ry: self.ry * s, ..*self }
    }
}

/// Smooth field in `[-1, 1]` built from a few random plane waves.
pub(crate) struct WaveField {
    waves: Vec<(f64, f64, f64)>,
}

impl WaveField {
    pub(crate) fn new<R: Rng>(rng: &mut R, count: usize, max_cycles: f64) -> Self {
        let waves = (0..count)
            .map(|_| {
                let theta = rng.random::<f64>() * std::f64::consts::TAU;
                let cycles = 1.0 + rng.random::<f64>() * (max_cycles - 1.0);
                let k = cycles * std::f64::consts::TAU;
                (k * theta.cos(), k * theta.sin(), rng.random::<f64>() * std::f64::consts::TAU)
            })
            .collect();
        Self { waves }
    }

    /// Value at normalized coordinates `(u, v)`.
    pub(crate) fn at(&self, u: f64, v: f64) -> f64 {
        let s: f64 = self.waves.iter().map(|&(kx, ky, ph)| (kx * u + ky * v + ph).sin()).sum();
        s / self.waves.len() as f64
    }
}

fn in_band<R: Rng>(rng: &mut R, band: [f64; 2]) -> f64 {
    band[0] + rng.random::<f64>() * (band[1] - band[0])
}

/// One labeled source-domain slice. Deterministic in `(spec, seed)`.
///
/// Two elliptic lungs sit in textured soft tissue. Each infection blob is a
/// ground-glass ellipse clipped to the lungs; the first blob, and about half of
/// the others, carry a consolidated core.
pub fn generate_source_sample(spec: &PhantomSpec, seed: u64) -> Result<(Slice, SegMask)> {
    spec.validate()?;
    let s = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = vec![BACKGROUND; s * s];

    let lungs: Vec<Ellipse> = {
        let (dx, dy) = (rng.random_range(-0.03..0.03), rng.random_range(-0.05..0.05));
        let rx = rng.random_range(0.13..0.17);
        let ry = rng.random_range(0.24..0.31);
        [0.3, 0.7]
            .iter()
            .map(|&cx| Ellipse {
                cx: cx + dx + rng.random_range(-0.015..0.015),
                cy: 0.5 + dy,
                rx: rx * rng.random_range(0.92..1.08),
                ry: ry * rng.random_range(0.92..1.08),
            })
            .collect()
    };
    let coord = |i: usize| (i as f64 + 0.5) / s as f64;
    for r in 0..s {
        for c in 0..s {
            if lungs.iter().any(|e| e.contains(coord(c), coord(r))) {
                labels[r * s + c] = LUNG;
            }
        }
    }

    let [lo, hi] = spec.infection_blob_count_range;
    let blobs = rng.random_range(lo..=hi);
    for b in 0..blobs {
        let lung = lungs[rng.random_range(0..lungs.len())];
        let t = rng.random::<f64>() * std::f64::consts::TAU;
        let rad = rng.random::<f64>().sqrt() * 0.6;
        let blob = Ellipse {
            cx: lung.cx + rad * lung.rx * t.cos(),
            cy: lung.cy + rad * lung.ry * t.sin(),
            rx: rng.random_range(0.035..0.08),
            ry: rng.random_range(0.035..0.08),
        };
        let core = (b == 0 || rng.random_bool(0.5)).then(|| blob.scaled(rng.random_range(0.4..0.65)));
        for r in 0..s {
            for c in 0..s {
                let (u, v) = (coord(c), coord(r));
                let l = &mut labels[r * s + c];
                if *l == BACKGROUND || !blob.contains(u, v) {
                    continue;
                }
                if core.is_some_and(|e| e.contains(u, v)) {
                    *l = CONSOLIDATION;
                } else if *l != CONSOLIDATION {
                    *l = GGO;
                }
            }
        }
    }

    let base = [
        in_band(&mut rng, spec.background_intensity_band),
        in_band(&mut rng, spec.lung_intensity_band),
        in_band(&mut rng, spec.ggo_intensity_band),
        in_band(&mut rng, spec.consolidation_intensity_band),
    ];
    let texture = WaveField::new(&mut rng, 6, 10.0);
    let noise = rand_distr::Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).expect("finite std");
    let mut pixels = Vec::with_capacity(s * s);
    for r in 0..s {
        for c in 0..s {
            let l = labels[r * s + c] as usize;
            let mut v = base[l] + spec.background_texture_scale * texture.at(coord(c), coord(r));
            if spec.noise_std > 0.0 {
                v += rng.sample(noise);
            }
            pixels.push(v as f32);
        }
    }
    Ok((Slice::from_raw(s, s, pixels), SegMask::new(s, s, labels)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic_and_seed_sensitive() {
        let spec = PhantomSpec::default();
        let a = generate_source_sample(&spec, 0).unwrap();
        let b = generate_source_sample(&spec, 0).unwrap();
        assert_eq!(a, b);
        let c = generate_source_sample(&spec, 1).unwrap();
        assert_ne!(a.0.pixels(), c.0.pixels());
        assert_ne!(a.1.labels(), c.1.labels());
    }

    #[test]
    fn every_class_present_for_default_spec() {
        let spec = PhantomSpec::default();
        for seed in 0..40 {
            let (_, m) = generate_source_sample(&spec, seed).unwrap();
            assert!(m.class_counts().iter().all(|&n| n > 0), "seed {seed}: {:?}", m.class_counts());
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let bad = [
            PhantomSpec { image_size: 100, ..Default::default() },
            PhantomSpec { ggo_intensity_band: [0.35, 0.58], ..Default::default() },
            PhantomSpec { consolidation_intensity_band: [0.3, 0.4], ..Default::default() },
            PhantomSpec { infection_blob_count_range: [0, 3], ..Default::default() },
            PhantomSpec { noise_std: -1.0, ..Default::default() },
            PhantomSpec { lung_count: 3, ..Default::default() },
        ];
        for spec in bad {
            assert!(matches!(generate_source_sample(&spec, 0), Err(Error::InvalidSpec(_))), "{spec:?}");
        }
    }

    #[test]
    fn intensities_stay_in_band_plus_noise() {
        let spec = PhantomSpec { noise_std: 0.0, ..Default::default() };
        let (x, m) = generate_source_sample(&spec, 3).unwrap();
        let bands = [
            spec.background_intensity_band,
            spec.lung_intensity_band,
            spec.ggo_intensity_band,
            spec.consolidation_intensity_band,
        ];
        let tol = spec.background_texture_scale + 1e-6;
        for (v, l) in x.pixels().iter().zip(m.labels()) {
            let [a, b] = bands[*l as usize];
            assert!((*v as f64) >= a - tol && (*v as f64) <= b + tol);
        }
    }

    #[test]
    fn class_means_are_ordered_and_separated() {
        let spec = PhantomSpec { noise_std: 0.0, ..Default::default() };
        for seed in 0..10 {
            let (x, m) = generate_source_sample(&spec, seed).unwrap();
            let mut sum = [0.0f64; 4];
            let counts = m.class_counts();
            for (v, l) in x.pixels().iter().zip(m.labels()) {
                sum[*l as usize] += *v as f64;
            }
            let mean: Vec<f64> = (0..4).map(|k| sum[k] / counts[k] as f64).collect();
            let order = [LUNG, GGO, CONSOLIDATION, BACKGROUND].map(|k| mean[k as usize]);
            assert!(order.windows(2).all(|w| w[1] - w[0] >= BAND_MARGIN), "{order:?}");
        }
    }

    #[test]
    fn infections_lie_inside_lungs() {
        let spec = PhantomSpec::default();
        let (_, m) = generate_source_sample(&spec, 0).unwrap();
        let (_, lungs_only) = {
            // Same seed: the lung support is drawn before any blob.
            let spec1 = PhantomSpec { infection_blob_count_range: [1, 1], ..spec.clone() };
            generate_source_sample(&spec1, 0).unwrap()
        };
        for (a, b) in m.labels().iter().zip(lungs_only.labels()) {
            assert_eq!(*a == BACKGROUND, *b == BACKGROUND);
        }
    }

    #[test]
    fn slice_validation() {
        assert!(Slice::new(16, 16, vec![0.5; 256]).is_ok());
        assert!(Slice::new(16, 16, vec![1.5; 256]).is_err());
        assert!(Slice::new(16, 16, vec![0.5; 255]).is_err());
        assert!(Slice::new(20, 16, vec![0.5; 320]).is_err());
        assert!(SegMask::new(2, 2, vec![0, 1, 2, 4]).is_err());
    }
}
