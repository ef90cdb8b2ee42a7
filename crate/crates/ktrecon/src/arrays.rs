//! Complex space-time volumes and the xt / kt / xf transform algebra.
//!
//! Conventions, fixed once for the whole crate:
//! - every FFT is unitary (scaled by `1/sqrt(N)` in both directions), so all
//!   transforms preserve the L2 norm exactly;
//! - the zero-frequency bin sits at the centre index `floor(N/2)` on every
//!   transformed axis (`fftshift` layout);
//! - the time axis is treated as periodic everywhere.
//!
//! With these choices the `f = 0` frame of an xf volume equals
//! `sqrt(T) x` (temporal mean of the xt volume), which fixes the scaling of
//! the temporal-average skip connection used by the models.

use std::sync::Arc;

use ndarray::{Array3, Array4, ArrayViewMut1, Axis, Zip};
use num_complex::Complex;
use rustfft::{Fft, FftNum, FftPlanner};

use crate::error::{Error, Result};

pub type C32 = Complex<f32>;

/// Which representation a volume currently lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Domain {
    /// image space x time
    Xt,
    /// k-space x time
    Kt,
    /// image space x temporal frequency
    Xf,
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Domain::Xt => write!(f, "xt"),
            Domain::Kt => write!(f, "kt"),
            Domain::Xf => write!(f, "xf"),
        }
    }
}

/// Voxel and frame spacing carried along with every volume.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GridMeta {
    pub dy_mm: f32,
    pub dx_mm: f32,
    pub dt_ms: f32,
}

impl GridMeta {
    pub fn new(dy_mm: f32, dx_mm: f32, dt_ms: f32) -> Result<Self> {
        if dy_mm <= 0.0 || dx_mm <= 0.0 || dt_ms <= 0.0 {
            return Err(Error::Config(format!(
                "grid spacing must be positive (dy={dy_mm}, dx={dx_mm}, dt={dt_ms})"
            )));
        }
        Ok(GridMeta { dy_mm, dx_mm, dt_ms })
    }
}

impl Default for GridMeta {
    fn default() -> Self {
        GridMeta { dy_mm: 2.0, dx_mm: 2.0, dt_ms: 72.0 }
    }
}

/// A single-channel complex volume with axes `(time, ky, kx)` /
/// `(time, y, x)` / `(freq, y, x)` depending on [`Domain`].
#[derive(Debug, Clone)]
pub struct DynamicImage {
    pub data: Array3<C32>,
    pub domain: Domain,
    pub meta: GridMeta,
}

impl DynamicImage {
    pub fn new(data: Array3<C32>, domain: Domain, meta: GridMeta) -> Result<Self> {
        let (t, ny, nx) = data.dim();
        if t == 0 || ny == 0 || nx == 0 {
            return Err(Error::Shape(format!("empty volume {t}x{ny}x{nx}")));
        }
        Ok(DynamicImage { data, domain, meta })
    }

    pub fn zeros(t: usize, ny: usize, nx: usize, domain: Domain, meta: GridMeta) -> Self {
        DynamicImage { data: Array3::zeros((t, ny, nx)), domain, meta }
    }

    pub fn n_frames(&self) -> usize {
        self.data.dim().0
    }

    pub fn ny(&self) -> usize {
        self.data.dim().1
    }

    pub fn nx(&self) -> usize {
        self.data.dim().2
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr() as f64).sum::<f64>().sqrt()
    }

    fn expect_domain(&self, want: Domain, op: &str) -> Result<()> {
        if self.domain != want {
            return Err(Error::Domain(format!(
                "{op} expects a {want} volume, got {}",
                self.domain
            )));
        }
        Ok(())
    }
}

/// A per-coil stack of complex volumes, axes `(coil, time, ky, kx)`.
#[derive(Debug, Clone)]
pub struct CoilImages {
    pub data: Array4<C32>,
    pub domain: Domain,
    pub meta: GridMeta,
}

impl CoilImages {
    pub fn new(data: Array4<C32>, domain: Domain, meta: GridMeta) -> Result<Self> {
        let (c, t, ny, nx) = data.dim();
        if c == 0 || t == 0 || ny == 0 || nx == 0 {
            return Err(Error::Shape(format!("empty coil stack {c}x{t}x{ny}x{nx}")));
        }
        Ok(CoilImages { data, domain, meta })
    }

    pub fn n_coils(&self) -> usize {
        self.data.dim().0
    }

    pub fn n_frames(&self) -> usize {
        self.data.dim().1
    }

    pub fn ny(&self) -> usize {
        self.data.dim().2
    }

    pub fn nx(&self) -> usize {
        self.data.dim().3
    }

    pub fn coil(&self, c: usize) -> DynamicImage {
        DynamicImage {
            data: self.data.index_axis(Axis(0), c).to_owned(),
            domain: self.domain,
            meta: self.meta,
        }
    }

    pub fn from_single(img: &DynamicImage) -> Self {
        CoilImages {
            data: img.data.clone().insert_axis(Axis(0)),
            domain: img.domain,
            meta: img.meta,
        }
    }

    fn expect_domain(&self, want: Domain, op: &str) -> Result<()> {
        if self.domain != want {
            return Err(Error::Domain(format!(
                "{op} expects a {want} stack, got {}",
                self.domain
            )));
        }
        Ok(())
    }
}

/// Centre index of a length-`n` axis under the fftshift layout.
pub fn center_index(n: usize) -> usize {
    n / 2
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub enum FftDirection {
    Forward,
    Inverse,
}

/// Unitary centered FFT of one lane, in place.
/// Layout: `out = fftshift(fft(ifftshift(lane))) / sqrt(n)` for the forward
/// direction, and the exact inverse for [`FftDirection::Inverse`].
fn transform_lane<T: FftNum + num_traits::Float>(
    lane: &mut ArrayViewMut1<Complex<T>>,
    plan: &Arc<dyn Fft<T>>,
    scratch: &mut [Complex<T>],
    buf: &mut [Complex<T>],
) {
    let n = lane.len();
    let half_lo = n / 2; // floor
    let half_hi = n - half_lo; // ceil
    // ifftshift: rotate left by floor(n/2)
    for (i, b) in buf.iter_mut().enumerate() {
        *b = lane[(i + half_lo) % n];
    }
    plan.process_with_scratch(buf, scratch);
    let scale = T::from(1.0 / (n as f64).sqrt()).unwrap();
    // fftshift: rotate left by ceil(n/2), with unitary scaling
    for (i, l) in lane.iter_mut().enumerate() {
        let b = buf[(i + half_hi) % n];
        *l = Complex::new(b.re * scale, b.im * scale);
    }
}

/// Apply a centered unitary FFT along `axis` of a 3-D complex array.
pub fn fft_axis3<T: FftNum + num_traits::Float>(
    data: &mut Array3<Complex<T>>,
    axis: usize,
    dir: FftDirection,
) {
    let n = data.shape()[axis];
    if n <= 1 {
        return;
    }
    let mut planner = FftPlanner::<T>::new();
    let plan = match dir {
        FftDirection::Forward => planner.plan_fft_forward(n),
        FftDirection::Inverse => planner.plan_fft_inverse(n),
    };
    let scratch_len = plan.get_inplace_scratch_len();
    Zip::from(data.lanes_mut(Axis(axis))).par_for_each(|mut lane| {
        let mut scratch = vec![Complex::<T>::new(T::zero(), T::zero()); scratch_len];
        let mut buf = vec![Complex::<T>::new(T::zero(), T::zero()); n];
        transform_lane(&mut lane, &plan, &mut scratch, &mut buf);
    });
}

/// Apply a centered unitary FFT along `axis` of a 4-D complex array.
pub fn fft_axis4<T: FftNum + num_traits::Float>(
    data: &mut Array4<Complex<T>>,
    axis: usize,
    dir: FftDirection,
) {
    let n = data.shape()[axis];
    if n <= 1 {
        return;
    }
    let mut planner = FftPlanner::<T>::new();
    let plan = match dir {
        FftDirection::Forward => planner.plan_fft_forward(n),
        FftDirection::Inverse => planner.plan_fft_inverse(n),
    };
    let scratch_len = plan.get_inplace_scratch_len();
    Zip::from(data.lanes_mut(Axis(axis))).par_for_each(|mut lane| {
        let mut scratch = vec![Complex::<T>::new(T::zero(), T::zero()); scratch_len];
        let mut buf = vec![Complex::<T>::new(T::zero(), T::zero()); n];
        transform_lane(&mut lane, &plan, &mut scratch, &mut buf);
    });
}

/// Spatial FFT per frame: image space -> k-space.
pub fn xt_to_kt(img: &DynamicImage) -> Result<DynamicImage> {
    img.expect_domain(Domain::Xt, "xt_to_kt")?;
    let mut data = img.data.clone();
    fft_axis3(&mut data, 1, FftDirection::Forward);
    fft_axis3(&mut data, 2, FftDirection::Forward);
    Ok(DynamicImage { data, domain: Domain::Kt, meta: img.meta })
}

/// Inverse spatial FFT per frame: k-space -> image space.
pub fn kt_to_xt(k: &DynamicImage) -> Result<DynamicImage> {
    k.expect_domain(Domain::Kt, "kt_to_xt")?;
    let mut data = k.data.clone();
    fft_axis3(&mut data, 1, FftDirection::Inverse);
    fft_axis3(&mut data, 2, FftDirection::Inverse);
    Ok(DynamicImage { data, domain: Domain::Xt, meta: k.meta })
}

/// Temporal FFT per pixel: xt -> xf. The `f = 0` frame lands at index
/// `floor(T/2)` and equals `sqrt(T)` times the temporal mean.
pub fn xt_to_xf(img: &DynamicImage) -> Result<DynamicImage> {
    img.expect_domain(Domain::Xt, "xt_to_xf")?;
    let mut data = img.data.clone();
    fft_axis3(&mut data, 0, FftDirection::Forward);
    Ok(DynamicImage { data, domain: Domain::Xf, meta: img.meta })
}

/// Inverse temporal FFT per pixel: xf -> xt.
pub fn xf_to_xt(img: &DynamicImage) -> Result<DynamicImage> {
    img.expect_domain(Domain::Xf, "xf_to_xt")?;
    let mut data = img.data.clone();
    fft_axis3(&mut data, 0, FftDirection::Inverse);
    Ok(DynamicImage { data, domain: Domain::Xt, meta: img.meta })
}

/// Per-coil variant of [`xt_to_kt`].
pub fn coil_xt_to_kt(imgs: &CoilImages) -> Result<CoilImages> {
    imgs.expect_domain(Domain::Xt, "coil_xt_to_kt")?;
    let mut data = imgs.data.clone();
    fft_axis4(&mut data, 2, FftDirection::Forward);
    fft_axis4(&mut data, 3, FftDirection::Forward);
    Ok(CoilImages { data, domain: Domain::Kt, meta: imgs.meta })
}

/// Per-coil variant of [`kt_to_xt`].
pub fn coil_kt_to_xt(k: &CoilImages) -> Result<CoilImages> {
    k.expect_domain(Domain::Kt, "coil_kt_to_xt")?;
    let mut data = k.data.clone();
    fft_axis4(&mut data, 2, FftDirection::Inverse);
    fft_axis4(&mut data, 3, FftDirection::Inverse);
    Ok(CoilImages { data, domain: Domain::Xt, meta: k.meta })
}

/// Per-coil variant of [`xt_to_xf`].
pub fn coil_xt_to_xf(imgs: &CoilImages) -> Result<CoilImages> {
    imgs.expect_domain(Domain::Xt, "coil_xt_to_xf")?;
    let mut data = imgs.data.clone();
    fft_axis4(&mut data, 1, FftDirection::Forward);
    Ok(CoilImages { data, domain: Domain::Xf, meta: imgs.meta })
}

/// Per-coil variant of [`xf_to_xt`].
pub fn coil_xf_to_xt(imgs: &CoilImages) -> Result<CoilImages> {
    imgs.expect_domain(Domain::Xf, "coil_xf_to_xt")?;
    let mut data = imgs.data.clone();
    fft_axis4(&mut data, 1, FftDirection::Inverse);
    Ok(CoilImages { data, domain: Domain::Xt, meta: imgs.meta })
}

/// Relative L2 distance between two volumes, `|a - b| / max(|a|, eps)`.
pub fn rel_error(a: &Array3<C32>, b: &Array3<C32>) -> f64 {
    let num: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).norm_sqr() as f64)
        .sum::<f64>()
        .sqrt();
    let den: f64 = a.iter().map(|z| z.norm_sqr() as f64).sum::<f64>().sqrt();
    num / den.max(1e-30)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::Rng;

    fn random_volume(t: usize, ny: usize, nx: usize, seed: u64) -> DynamicImage {
        let mut rng = crate::util::stream_rng(seed, &[0xa11]);
        let data = Array3::from_shape_simple_fn((t, ny, nx), || {
            C32::new(rng.random::<f32>() - 0.5, rng.random::<f32>() - 0.5)
        });
        DynamicImage::new(data, Domain::Xt, GridMeta::default()).unwrap()
    }

    /// Direct L2 norm by summation, independent of the transform path.
    fn direct_norm(data: &Array3<C32>) -> f64 {
        data.iter().map(|z| z.norm_sqr() as f64).sum::<f64>().sqrt()
    }

    #[test]
    fn constant_image_concentrates_at_center_bin() {
        let n = 8;
        let img = DynamicImage::new(
            Array3::from_elem((1, n, n), C32::new(1.0, 0.0)),
            Domain::Xt,
            GridMeta::default(),
        )
        .unwrap();
        let k = xt_to_kt(&img).unwrap();
        let c = center_index(n);
        // unitary convention: DC magnitude is N for an N x N unit image
        assert!((k.data[[0, c, c]].re - n as f32).abs() < 1e-4);
        for ((_, y, x), v) in k.data.indexed_iter() {
            if (y, x) != (c, c) {
                assert!(v.norm() < 1e-4, "stray energy at ({y},{x}): {v}");
            }
        }
    }

    #[test]
    fn central_impulse_gives_constant_image() {
        let n = 8;
        let mut k = DynamicImage::zeros(1, n, n, Domain::Kt, GridMeta::default());
        let c = center_index(n);
        k.data[[0, c, c]] = C32::new(n as f32, 0.0);
        let img = kt_to_xt(&k).unwrap();
        for v in img.data.iter() {
            assert!((v - C32::new(1.0, 0.0)).norm() < 1e-5);
        }
    }

    #[test]
    fn zero_kspace_gives_zero_image() {
        let k = DynamicImage::zeros(2, 4, 4, Domain::Kt, GridMeta::default());
        let img = kt_to_xt(&k).unwrap();
        assert!(img.data.iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn spatial_round_trip_and_parseval() {
        let img = random_volume(4, 8, 8, 31);
        let k = xt_to_kt(&img).unwrap();
        // Parseval oracle: direct summation on both sides
        let n_img = direct_norm(&img.data);
        let n_k = direct_norm(&k.data);
        assert!((n_img - n_k).abs() / n_img < 1e-6, "{n_img} vs {n_k}");
        let back = kt_to_xt(&k).unwrap();
        assert!(rel_error(&img.data, &back.data) < 1e-6);
        assert_eq!(back.domain, Domain::Xt);
    }

    #[test]
    fn temporal_round_trip_and_parseval() {
        let img = random_volume(6, 5, 7, 77); // odd sizes exercise the shifts
        let xf = xt_to_xf(&img).unwrap();
        assert!((direct_norm(&img.data) - direct_norm(&xf.data)).abs() / direct_norm(&img.data) < 1e-6);
        let back = xf_to_xt(&xf).unwrap();
        assert!(rel_error(&img.data, &back.data) < 1e-6);
    }

    #[test]
    fn static_scene_energy_sits_in_f0_frame() {
        let t = 8;
        let frame =
            Array3::from_shape_fn((1, 4, 4), |(_, y, x)| C32::new((y * 4 + x) as f32, 0.5));
        let mut data = Array3::zeros((t, 4, 4));
        for ti in 0..t {
            data.slice_mut(ndarray::s![ti..ti + 1, .., ..]).assign(&frame);
        }
        let img = DynamicImage::new(data, Domain::Xt, GridMeta::default()).unwrap();
        let xf = xt_to_xf(&img).unwrap();
        let f0 = center_index(t);
        for (f, plane) in xf.data.outer_iter().enumerate() {
            if f == f0 {
                // f=0 frame equals sqrt(T) x temporal mean
                let scale = (t as f32).sqrt();
                for ((y, x), v) in plane.indexed_iter() {
                    let want = frame[[0, y, x]] * scale;
                    assert!((v - want).norm() < 1e-4);
                }
            } else {
                assert!(plane.iter().all(|z| z.norm() < 1e-4));
            }
        }
    }

    #[test]
    fn single_pixel_sinusoid_has_two_symmetric_bins() {
        let t = 16;
        let k = 3usize;
        let mut data = Array3::<C32>::zeros((t, 4, 4));
        for ti in 0..t {
            let v = (2.0 * std::f32::consts::PI * k as f32 * ti as f32 / t as f32).cos();
            data[[ti, 1, 2]] = C32::new(v, 0.0);
        }
        let img = DynamicImage::new(data, Domain::Xt, GridMeta::default()).unwrap();
        let xf = xt_to_xf(&img).unwrap();
        let c = center_index(t);
        for f in 0..t {
            let mag = xf.data[[f, 1, 2]].norm();
            if f == c + k || f == c - k {
                assert!(mag > 1e-3, "expected energy at bin {f}");
            } else {
                assert!(mag < 1e-4, "stray energy at bin {f}: {mag}");
            }
        }
    }

    #[test]
    fn f0_only_xf_gives_time_constant_xt() {
        let t = 8;
        let mut xf = DynamicImage::zeros(t, 3, 3, Domain::Xf, GridMeta::default());
        xf.data[[center_index(t), 1, 1]] = C32::new(2.0, -1.0);
        let xt = xf_to_xt(&xf).unwrap();
        let first = xt.data[[0, 1, 1]];
        for ti in 0..t {
            assert!((xt.data[[ti, 1, 1]] - first).norm() < 1e-6);
        }
        assert!((first - C32::new(2.0, -1.0) / (t as f32).sqrt()).norm() < 1e-6);
    }

    #[test]
    fn transforms_are_linear() {
        let a = random_volume(4, 6, 6, 1);
        let b = random_volume(4, 6, 6, 2);
        let alpha = C32::new(0.7, -0.3);
        let beta = C32::new(-1.1, 0.2);
        let mixed = DynamicImage::new(
            &a.data * alpha + &b.data * beta,
            Domain::Xt,
            GridMeta::default(),
        )
        .unwrap();
        for (ta, tb, tm) in [
            (xt_to_kt(&a).unwrap(), xt_to_kt(&b).unwrap(), xt_to_kt(&mixed).unwrap()),
            (xt_to_xf(&a).unwrap(), xt_to_xf(&b).unwrap(), xt_to_xf(&mixed).unwrap()),
        ] {
            let lin = &ta.data * alpha + &tb.data * beta;
            assert!(rel_error(&lin, &tm.data) < 1e-6);
        }
    }

    #[test]
    fn wrong_domain_is_rejected() {
        let img = random_volume(2, 4, 4, 9);
        let k = xt_to_kt(&img).unwrap();
        assert!(matches!(xt_to_kt(&k), Err(Error::Domain(_))));
        assert!(matches!(xf_to_xt(&img), Err(Error::Domain(_))));
        assert!(matches!(kt_to_xt(&img), Err(Error::Domain(_))));
    }
}
