//! SENSE coil combination and unfolding.
//!
//! Combination is the pixelwise matched filter normalized by the coil
//! sum-of-squares; unfolding solves, per group of aliased pixel positions,
//! a small regularized least-squares system built from the sensitivity maps
//! and the aliasing kernel of the sampling mask.
//!
//! The aliasing kernel is extracted numerically by pushing a delta through
//! the exact transform path (`FFT -> mask -> IFFT`), so the group systems
//! inherit the crate's FFT conventions by construction instead of relying on
//! hand-derived phase factors.

use ndarray::{Array1, Array2, Array3, ArrayView1, Axis};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::acquisition::SamplingMask;
use crate::arrays::{fft_axis3, CoilImages, Domain, DynamicImage, FftDirection, C32};
use crate::error::{Error, Result};
use crate::phantom::CoilModel;
use crate::util::{cholesky, solve_lower, solve_lower_herm};

/// Settings for combination/unfolding.
#[derive(Debug, Clone, Copy)]
pub struct CombineConfig {
    /// Ridge added to the normal matrix; `None` means `1e-6 * max |s|^2`.
    pub epsilon: Option<f64>,
}

impl Default for CombineConfig {
    fn default() -> Self {
        CombineConfig { epsilon: None }
    }
}

fn default_epsilon(coils: &CoilModel) -> f64 {
    let max_s2 = coils
        .sensitivities
        .iter()
        .map(|s| s.norm_sqr() as f64)
        .fold(0.0f64, f64::max);
    1e-6 * max_s2.max(1e-30)
}

/// Pixelwise SENSE combination:
/// `x(p) = sum_c conj(s_c(p)) y_c(p) / sum_c |s_c(p)|^2`, zero outside coil
/// support (`sum |s|^2 <= eps`). The guard is a support threshold, not an
/// additive ridge, so supported pixels are combined without bias. Assumes
/// prewhitened data (identity coil covariance), under which this is the
/// maximum-likelihood combiner.
pub fn sense_combine(
    coil_imgs: &CoilImages,
    coils: &CoilModel,
    cfg: Option<&CombineConfig>,
) -> Result<DynamicImage> {
    if coil_imgs.domain != Domain::Xt {
        return Err(Error::Domain("sense_combine expects xt coil images".into()));
    }
    let (nc, t_frames, ny, nx) = coil_imgs.data.dim();
    let (sc, sy, sx) = coils.sensitivities.dim();
    if (sc, sy, sx) != (nc, ny, nx) {
        return Err(Error::Shape(format!(
            "sensitivities {sc}x{sy}x{sx} do not match coil images {nc}x{ny}x{nx}"
        )));
    }
    let eps = cfg.and_then(|c| c.epsilon).unwrap_or_else(|| default_epsilon(coils)) as f32;

    let mut out = Array3::<C32>::zeros((t_frames, ny, nx));
    for y in 0..ny {
        for x in 0..nx {
            let mut sos = 0.0f32;
            for c in 0..nc {
                sos += coils.sensitivities[[c, y, x]].norm_sqr();
            }
            if sos <= eps {
                continue; // outside coil support
            }
            let denom = sos;
            for t in 0..t_frames {
                let mut num = C32::new(0.0, 0.0);
                for c in 0..nc {
                    num += coils.sensitivities[[c, y, x]].conj() * coil_imgs.data[[c, t, y, x]];
                }
                out[[t, y, x]] = num / denom;
            }
        }
    }
    DynamicImage::new(out, Domain::Xt, coil_imgs.meta)
}

/// Aliasing kernel of one mask row: the image-space response to a delta at
/// y = 0 after `FFT -> mask -> IFFT` along ky. The zero-filled aliased image
/// is the circular convolution of the true image with this kernel.
pub(crate) fn alias_kernel_1d(mask_row: ArrayView1<bool>) -> Vec<C32> {
    let ny = mask_row.len();
    let mut a = Array3::<C32>::zeros((1, ny, 1));
    a[[0, 0, 0]] = C32::new(1.0, 0.0);
    fft_axis3(&mut a, 1, FftDirection::Forward);
    for ky in 0..ny {
        if !mask_row[ky] {
            a[[0, ky, 0]] = C32::new(0.0, 0.0);
        }
    }
    fft_axis3(&mut a, 1, FftDirection::Inverse);
    (0..ny).map(|y| a[[0, y, 0]]).collect()
}

/// 2-D aliasing kernel of a k-t mask over `(f, y)`: response to a delta in
/// the xf domain pushed through `xf -> xt -> kt -> mask -> kt -> xt -> xf`.
pub(crate) fn alias_kernel_2d(mask: &SamplingMask) -> Array2<C32> {
    let (t_frames, ny) = mask.mask.dim();
    let mut a = Array3::<C32>::zeros((t_frames, ny, 1));
    a[[0, 0, 0]] = C32::new(1.0, 0.0);
    // xf -> xt
    fft_axis3(&mut a, 0, FftDirection::Inverse);
    // xt -> kt (ky only; kx plays no role in the mask)
    fft_axis3(&mut a, 1, FftDirection::Forward);
    for ((t, ky), m) in mask.mask.indexed_iter() {
        if !*m {
            a[[t, ky, 0]] = C32::new(0.0, 0.0);
        }
    }
    fft_axis3(&mut a, 1, FftDirection::Inverse);
    fft_axis3(&mut a, 0, FftDirection::Forward);
    let mut out = Array2::<C32>::zeros((t_frames, ny));
    for f in 0..t_frames {
        for y in 0..ny {
            out[[f, y]] = a[[f, y, 0]];
        }
    }
    out
}

/// Significant taps `(offset, coeff)` of a 1-D kernel.
pub(crate) fn nonzero_taps_1d(kernel: &[C32]) -> Vec<(usize, C32)> {
    let max = kernel.iter().map(|c| c.norm()).fold(0.0f32, f32::max);
    let tol = 1e-4 * max;
    kernel
        .iter()
        .enumerate()
        .filter(|(_, c)| c.norm() > tol)
        .map(|(i, c)| (i, *c))
        .collect()
}

/// Result of SENSE unfolding: the combined image plus a per-pixel
/// conditioning map (`min_pivot/max_pivot` of the unregularized normal
/// matrix Cholesky; 1 is perfectly conditioned) and the flag raster of
/// rank-deficient groups (solved in minimum-norm ridge fallback).
#[derive(Debug, Clone)]
pub struct UnfoldResult {
    pub image: DynamicImage,
    pub condition: Array2<f32>,
    pub flagged: Array2<bool>,
}

const RANK_DEFICIENT_RATIO: f64 = 1e-6;

/// Unfold uniform-lattice aliased coil images frame by frame.
///
/// Every group of `R` superimposed y positions is solved jointly from all
/// coils with a ridge `eps`; rank-deficient groups fall back to the
/// minimum-norm ridge solution and are flagged.
pub fn sense_unfold(
    aliased: &CoilImages,
    coils: &CoilModel,
    mask: &SamplingMask,
    cfg: Option<&CombineConfig>,
) -> Result<UnfoldResult> {
    if aliased.domain != Domain::Xt {
        return Err(Error::Domain("sense_unfold expects xt coil images".into()));
    }
    let (nc, t_frames, ny, nx) = aliased.data.dim();
    if coils.n_coils() != nc {
        return Err(Error::Shape("coil count mismatch".into()));
    }
    if mask.mask.dim() != (t_frames, ny) {
        return Err(Error::Shape("mask does not match aliased stack".into()));
    }
    let r = mask.r.max(1);
    if ny % r != 0 {
        return Err(Error::Config(format!("ny={ny} not a multiple of R={r}")));
    }
    let step = ny / r;
    let eps = cfg.and_then(|c| c.epsilon).unwrap_or_else(|| default_epsilon(coils));

    let mut out = Array3::<C32>::zeros((t_frames, ny, nx));
    let mut condition = Array2::<f32>::from_elem((ny, nx), 1.0);
    let mut flagged = Array2::<bool>::from_elem((ny, nx), false);

    for t in 0..t_frames {
        let kernel = alias_kernel_1d(mask.mask.index_axis(Axis(0), t));
        let taps = nonzero_taps_1d(&kernel);
        if taps.len() != r || taps.iter().any(|(off, _)| off % step != 0) {
            return Err(Error::Numeric(format!(
                "frame {t}: mask is not a uniform R={r} lattice (found {} taps)",
                taps.len()
            )));
        }
        // tap coefficient for a group-internal offset of j*step
        let tap = |j: usize| {
            let c = kernel[(j * step) % ny];
            Complex64::new(c.re as f64, c.im as f64)
        };
        let results: Vec<(usize, Vec<(usize, Complex64, f64, bool)>)> = (0..nx)
            .into_par_iter()
            .map(|x| {
                let mut col = Vec::with_capacity(ny);
                for y0 in 0..step {
                    // group members y_j = y0 + j*step
                    let mut b = Array2::<Complex64>::zeros((nc * r, r));
                    let mut z = Array1::<Complex64>::zeros(nc * r);
                    for p in 0..r {
                        let yp = y0 + p * step;
                        for c in 0..nc {
                            let row = c * r + p;
                            let v = aliased.data[[c, t, yp, x]];
                            z[row] = Complex64::new(v.re as f64, v.im as f64);
                            for j in 0..r {
                                let yj = y0 + j * step;
                                let s = coils.sensitivities[[c, yj, x]];
                                let s = Complex64::new(s.re as f64, s.im as f64);
                                b[[row, j]] = tap((r + p - j) % r) * s;
                            }
                        }
                    }
                    let (u, cond, deficient) = solve_group(&b, &z, eps);
                    for (j, uj) in u.iter().enumerate() {
                        col.push((y0 + j * step, *uj, cond, deficient));
                    }
                }
                (x, col)
            })
            .collect();
        for (x, col) in results {
            for (y, u, cond, deficient) in col {
                out[[t, y, x]] = C32::new(u.re as f32, u.im as f32);
                // per-frame worst case
                let c = cond as f32;
                if c < condition[[y, x]] {
                    condition[[y, x]] = c;
                }
                flagged[[y, x]] |= deficient;
            }
        }
    }

    Ok(UnfoldResult {
        image: DynamicImage::new(out, Domain::Xt, aliased.meta)?,
        condition,
        flagged,
    })
}

/// Ridge least squares `(B^H B + eps I) u = B^H z` with a conditioning probe.
/// Returns `(u, min_pivot/max_pivot, rank_deficient)`.
pub(crate) fn solve_group(
    b: &Array2<Complex64>,
    z: &Array1<Complex64>,
    eps: f64,
) -> (Array1<Complex64>, f64, bool) {
    let r = b.ncols();
    let bh = b.mapv(|v| v.conj()).reversed_axes();
    let mut normal = bh.dot(b);
    let rhs = bh.dot(z);

    // conditioning probe on the unregularized normal matrix
    let (cond, deficient) = match cholesky(&normal) {
        Ok(l) => {
            let mut minp = f64::INFINITY;
            let mut maxp = 0.0f64;
            for i in 0..r {
                let p = l[[i, i]].re;
                minp = minp.min(p);
                maxp = maxp.max(p);
            }
            let ratio = (minp / maxp).powi(2);
            (ratio, ratio < RANK_DEFICIENT_RATIO)
        }
        Err(_) => (0.0, true),
    };

    for i in 0..r {
        normal[[i, i]] += Complex64::new(eps, 0.0);
    }
    let u = match cholesky(&normal) {
        Ok(l) => solve_lower_herm(&l, &solve_lower(&l, &rhs)),
        Err(_) => Array1::zeros(r),
    };
    (u, cond, deficient)
}

/// Solve a prior-weighted ridge system
/// `u = (B^H B + lambda diag(1/w))^{-1} B^H z` where `w` are nonnegative
/// prior variances (larger w = weaker penalty).
pub(crate) fn solve_group_weighted(
    b: &Array2<Complex64>,
    z: &Array1<Complex64>,
    weights: &[f64],
    lambda: f64,
) -> Array1<Complex64> {
    let r = b.ncols();
    let bh = b.mapv(|v| v.conj()).reversed_axes();
    let mut normal = bh.dot(b);
    let rhs = bh.dot(z);
    let wmax = weights.iter().cloned().fold(0.0f64, f64::max);
    for i in 0..r {
        let w = (weights[i].max(1e-12 * wmax.max(1e-30))).max(1e-30);
        normal[[i, i]] += Complex64::new(lambda / w, 0.0);
    }
    match cholesky(&normal) {
        Ok(l) => solve_lower_herm(&l, &solve_lower(&l, &rhs)),
        Err(_) => Array1::zeros(r),
    }
}
