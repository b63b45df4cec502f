use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_pair, SegMask, Slice};
use crate::error::Result;

pub const MAX_ROTATION_DEG: f64 = 10.0;
pub const MAX_SHEAR: f64 = 0.1;
/// Gamma exponents are drawn log-uniformly from this range.
pub const AUG_GAMMA_RANGE: [f64; 2] = [0.8, 1.25];

/// One realization of the augmentation. Zero rotation, zero shear, unit
/// gamma and no normalization is the identity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    pub rotation_deg: f64,
    pub shear: f64,
    pub gamma: f64,
    pub normalize: bool,
}

impl AugmentDraw {
    pub const IDENTITY: Self = Self { rotation_deg: 0.0, shear: 0.0, gamma: 1.0, normalize: false };

    /// Each transform fires independently with probability 1/2.
    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        let mut d = Self::IDENTITY;
        if rng.random_bool(0.5) {
            d.rotation_deg = rng.random_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG);
        }
        if rng.random_bool(0.5) {
            d.shear = rng.random_range(-MAX_SHEAR..=MAX_SHEAR);
        }
        if rng.random_bool(0.5) {
            let [lo, hi] = AUG_GAMMA_RANGE.map(f64::ln);
            d.gamma = rng.random_range(lo..=hi).exp();
        }
        d.normalize = rng.random_bool(0.5);
        d
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }
}

pub fn augment(x: &Slice, m: &SegMask, seed: u64) -> Result<(Slice, SegMask)> {
    let draw = AugmentDraw::sample(&mut ChaCha8Rng::seed_from_u64(seed));
    augment_with(x, m, &draw)
}

/// Augments an unlabeled slice with the draw `augment` would make for `seed`.
pub fn augment_unlabeled(x: &Slice, seed: u64) -> Result<Slice> {
    let blank = SegMask::new(x.height(), x.width(), vec![0; x.height() * x.width()])?;
    Ok(augment(x, &blank, seed)?.0)
}

/// Applies rotation and shear about the image centre (slice bilinear, mask
/// nearest, both edge-clamped), then gamma and min-max normalization to the
/// slice only.
///
/// With `x` the column and `y` the row, a positive angle moves a point at
/// offset `(dx, dy)` from the centre to `(cos a dx - sin a dy, sin a dx + cos a dy)`.
/// Shear is applied before rotation: `x += shear * dy`.
pub fn augment_with(x: &Slice, m: &SegMask, draw: &AugmentDraw) -> Result<(Slice, SegMask)> {
    check_pair(x, m)?;
    let (h, w) = (x.height(), x.width());
    let (mut px, mut labels) = (x.pixels().to_vec(), m.labels().to_vec());

    if draw.rotation_deg != 0.0 || draw.shear != 0.0 {
        let (s, c) = draw.rotation_deg.to_radians().sin_cos();
        let k = draw.shear;
        // Forward map A = R * Sh; invert for backward sampling.
        let a = [[c, c * k - s], [s, s * k + c]];
        let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
        let inv = [[a[1][1] / det, -a[0][1] / det], [-a[1][0] / det, a[0][0] / det]];
        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        let clamp = |v: f64, n: usize| v.clamp(0.0, (n - 1) as f64);
        for r in 0..h {
            for col in 0..w {
                let (dx, dy) = (col as f64 - cx, r as f64 - cy);
                let sx = clamp(inv[0][0] * dx + inv[0][1] * dy + cx, w);
                let sy = clamp(inv[1][0] * dx + inv[1][1] * dy + cy, h);
                labels[r * w + col] = m.at(sy.round() as usize, sx.round() as usize);
                let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
                let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
                let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
                let top = x.at(y0, x0) as f64 * (1.0 - fx) + x.at(y0, x1) as f64 * fx;
                let bot = x.at(y1, x0) as f64 * (1.0 - fx) + x.at(y1, x1) as f64 * fx;
                px[r * w + col] = (top * (1.0 - fy) + bot * fy) as f32;
            }
        }
    }
    if draw.gamma != 1.0 {
        px.iter_mut().for_each(|v| *v = (*v as f64).powf(draw.gamma) as f32);
    }
    if draw.normalize {
        let (lo, hi) = px.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        if hi > lo {
            px.iter_mut().for_each(|v| *v = (*v - lo) / (hi - lo));
        }
    }
    Ok((Slice::from_raw(h, w, px), SegMask::new(h, w, labels)?))
}

#[cfg(test)]
mod tests {
    use super::super::generate_source_sample;
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn identity_draw_is_exact() {
        let (x, m) = generate_source_sample(&Default::default(), 2).unwrap();
        let (y, n) = augment_with(&x, &m, &AugmentDraw::IDENTITY).unwrap();
        assert_eq!((&y, &n), (&x, &m));
        let seed = (0..200)
            .find(|&s| AugmentDraw::sample(&mut ChaCha8Rng::seed_from_u64(s)).is_identity())
            .expect("an identity seed among the first 200");
        assert_eq!(augment(&x, &m, seed).unwrap(), (x, m));
    }

    #[test]
    fn draws_stay_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let d = AugmentDraw::sample(&mut rng);
            assert!(d.rotation_deg.abs() <= MAX_ROTATION_DEG && d.shear.abs() <= MAX_SHEAR);
            assert!(d.gamma >= AUG_GAMMA_RANGE[0] - 1e-12 && d.gamma <= AUG_GAMMA_RANGE[1] + 1e-12);
        }
    }

    #[test]
    fn labels_never_invented() {
        let (x, m) = generate_source_sample(&Default::default(), 8).unwrap();
        let before: BTreeSet<u8> = m.labels().iter().copied().collect();
        for seed in 0..20 {
            let (y, n) = augment(&x, &m, seed).unwrap();
            assert_eq!((y.height(), y.width()), (x.height(), x.width()));
            assert!(n.labels().iter().all(|l| before.contains(l)));
        }
    }

    /// Forward-rotating a marked pixel must land it on the grid point nearest
    /// the analytic image of its centre.
    #[test]
    fn rotation_moves_marked_pixel_analytically() {
        let (h, w) = (64, 64);
        let (cx, cy) = (31.5, 31.5);
        let a = 5f64.to_radians();
        let mut checked = 0;
        for (r, c) in [(10usize, 40usize), (50, 12), (20, 20), (45, 50), (33, 5), (8, 30)] {
            let (dx, dy) = (c as f64 - cx, r as f64 - cy);
            let (tx, ty) = (a.cos() * dx - a.sin() * dy + cx, a.sin() * dx + a.cos() * dy + cy);
            // Skip targets near a cell boundary, where nearest sampling is ambiguous.
            if (tx - tx.round()).abs() > 0.3 || (ty - ty.round()).abs() > 0.3 {
                continue;
            }
            let mut labels = vec![0u8; h * w];
            labels[r * w + c] = 1;
            let m = SegMask::new(h, w, labels).unwrap();
            let x = Slice::filled(h, w, 0.5).unwrap();
            let draw = AugmentDraw { rotation_deg: 5.0, ..AugmentDraw::IDENTITY };
            let (_, out) = augment_with(&x, &m, &draw).unwrap();
            assert_eq!(out.at(ty.round() as usize, tx.round() as usize), 1, "pixel ({r}, {c})");
            let marked: Vec<usize> = (0..h * w).filter(|&i| out.labels()[i] == 1).collect();
            assert!(marked.iter().all(|&i| ((i / w) as f64 - ty).abs() <= 1.0 && ((i % w) as f64 - tx).abs() <= 1.0));
            checked += 1;
        }
        assert!(checked >= 3);
    }

    #[test]
    fn gamma_and_normalization_touch_slice_only() {
        let (x, m) = generate_source_sample(&Default::default(), 1).unwrap();
        let d = AugmentDraw { gamma: 1.2, normalize: true, ..AugmentDraw::IDENTITY };
        let (y, n) = augment_with(&x, &m, &d).unwrap();
        assert_eq!(n, m);
        let (lo, hi) = y.pixels().iter().fold((1f32, 0f32), |(a, b), &v| (a.min(v), b.max(v)));
        assert_eq!((lo, hi), (0.0, 1.0));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let x = Slice::filled(16, 16, 0.1).unwrap();
        let m = SegMask::new(16, 32, vec![0; 512]).unwrap();
        assert!(augment(&x, &m, 0).is_err());
    }
}
