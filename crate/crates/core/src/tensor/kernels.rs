//! Dense kernels shared by the forward and backward passes.

use rayon::prelude::*;

use super::Real;

/// Row-major `C = A' * B' + beta * C` where `A'` is `m x k` and `B'` is `k x n`.
///
/// With `ta` set, `a` holds the `k x m` matrix and is read transposed; likewise `tb`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul<T: Real>(
    ta: bool,
    tb: bool,
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let rsc = n as isize;
    let call = |rows: usize, cols: usize, a: *const T, b: *const T, c: *mut T| {
        // SAFETY: callers pass in-bounds sub-blocks; `c` blocks are disjoint.
        unsafe { T::gemm(rows, k, cols, T::one(), a, rsa, csa, b, rsb, csb, beta, c, rsc, 1) }
    };
    if m * n * k < PAR_MIN_FLOPS {
        return call(m, n, a.as_ptr(), b.as_ptr(), c.as_mut_ptr());
    }
    // Fixed block sizes, independent of the thread count, so results do not
    // depend on UDASEG_THREADS.
    if m >= n {
        c[..m * n].par_chunks_mut(PAR_BLOCK * n).enumerate().for_each(|(i, blk)| {
            let r0 = i * PAR_BLOCK;
            let a0 = a.as_ptr().wrapping_offset(r0 as isize * rsa);
            call(blk.len() / n, n, a0, b.as_ptr(), blk.as_mut_ptr());
        });
    } else {
        let (ap, bp, cp) = (SendPtr(a.as_ptr() as *mut T), SendPtr(b.as_ptr() as *mut T), SendPtr(c.as_mut_ptr()));
        (0..n.div_ceil(PAR_BLOCK)).into_par_iter().for_each(|j| {
            let c0 = j * PAR_BLOCK;
            let w = PAR_BLOCK.min(n - c0);
            let b0 = bp.get().wrapping_offset(c0 as isize * csb);
            call(m, w, ap.get(), b0, cp.get().wrapping_add(c0));
        });
    }
}

const PAR_MIN_FLOPS: usize = 1 << 20;
const PAR_BLOCK: usize = 256;

#[derive(Clone, Copy)]
struct SendPtr<T>(*mut T);
// SAFETY: used only for disjoint column blocks of one matrix.
unsafe impl<T> Send for SendPtr<T> {}
unsafe impl<T> Sync for SendPtr<T> {}
impl<T> SendPtr<T> {
    fn get(self) -> *mut T {
        self.0
    }
}

/// Geometry of a square-kernel convolution over one `c x h x w` image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if h + 2 * pad < k || w + 2 * pad < k || stride == 0 {
            return None;
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        Some(Self { c, h, w, k, stride, pad, oh, ow })
    }

    pub fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// True when im2col is the identity (1x1, stride 1, no padding).
    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Range of output columns whose input column `ox * stride + kx - pad` is in bounds.
    #[inline]
    fn valid_ox(&self, kx: usize) -> (usize, usize) {
        let s = self.stride;
        // smallest ox with ox*s + kx >= pad
        let lo = if kx >= self.pad { 0 } else { (self.pad - kx).div_ceil(s) };
        // largest ox with ox*s + kx - pad <= w - 1
        let hi = if self.w + self.pad < kx + 1 { 0 } else { (self.w + self.pad - kx - 1) / s + 1 };
        (lo.min(self.ow), hi.min(self.ow))
    }
}

pub(crate) fn im2col<T: Real>(img: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (h, w, k, s, ow) = (g.h, g.w, g.k, g.stride, g.ow);
    let plane = g.cols();
    debug_assert_eq!(cols.len(), g.rows() * plane);
    for ci in 0..g.c {
        let src_plane = &img[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * plane;
                let (lo, hi) = g.valid_ox(kx);
                for oy in 0..g.oh {
                    let dst = &mut cols[row + oy * ow..row + (oy + 1) * ow];
                    let iy = (oy * s + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize || lo >= hi {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &src_plane[iy as usize * w..(iy as usize + 1) * w];
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    if s == 1 {
                        let start = lo + kx - g.pad;
                        dst[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    } else {
                        for ox in lo..hi {
                            dst[ox] = src[ox * s + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add of `cols` back onto the image (adjoint of [`im2col`]).
pub(crate) fn col2im<T: Real>(cols: &[T], g: &ConvGeom, img: &mut [T]) {
    let (h, w, k, s, ow) = (g.h, g.w, g.k, g.stride, g.ow);
    let plane = g.cols();
    for ci in 0..g.c {
        let dst_plane = &mut img[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * plane;
                let (lo, hi) = g.valid_ox(kx);
                if lo >= hi {
                    continue;
                }
                for oy in 0..g.oh {
                    let iy = (oy * s + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &cols[row + oy * ow..row + (oy + 1) * ow];
                    let dst = &mut dst_plane[iy as usize * w..(iy as usize + 1) * w];
                    if s == 1 {
                        let start = lo + kx - g.pad;
                        for (d, v) in dst[start..start + hi - lo].iter_mut().zip(&src[lo..hi]) {
                            *d += *v;
                        }
                    } else {
                        for ox in lo..hi {
                            dst[ox * s + kx - g.pad] += src[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Source taps for 2x bilinear upsampling along one axis (half-pixel centers, edge clamp).
pub(crate) fn upsample_taps<T: Real>(n: usize) -> Vec<(usize, usize, T, T)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            let f = src - i0 as f64;
            (i0, i1, T::lit(1.0 - f), T::lit(f))
        })
        .collect()
}
