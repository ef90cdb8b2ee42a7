//! Sampling patterns, multi-coil forward encoding, noise injection,
//! prewhitening, low-resolution ground-truth construction and retrospective
//! undersampling.
//!
//! Two mask families exist: a uniform k-t lattice that samples every R-th ky
//! line with a per-frame shear (any R cyclically consecutive frames cover
//! the full grid), and a dense low-resolution band that samples the central
//! ky lines of every frame. The measured low-resolution band, zero-padded on
//! the full grid, is the ground truth the rest of the pipeline recovers.

use ndarray::{Array2, Array4, Axis};
use num_complex::Complex64;
use rand_distr::{Distribution, Normal};

use crate::arrays::{
    center_index, coil_kt_to_xt, fft_axis4, CoilImages, Domain, DynamicImage, FftDirection,
    GridMeta, C32,
};
use crate::error::{Error, Result};
use crate::phantom::{CoilModel, Subject, STREAM_NOISE};
use crate::sense::sense_combine;
use crate::util::{cholesky, invert_lower, stream_rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    Lattice,
    DenseLowres,
}

/// Boolean k-t sampling mask over `(time, ky)`, broadcast over kx and coil.
#[derive(Debug, Clone)]
pub struct SamplingMask {
    pub mask: Array2<bool>,
    pub kind: MaskKind,
    pub r: usize,
    pub shear: usize,
    pub n_central: usize,
}

/// Serializable description of a mask; masks are always rebuilt from this,
/// never stored as rasters.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct MaskSpec {
    pub kind: MaskKind,
    pub r: usize,
    pub shear: usize,
    pub n_central: usize,
}

impl SamplingMask {
    pub fn n_frames(&self) -> usize {
        self.mask.dim().0
    }

    pub fn ny(&self) -> usize {
        self.mask.dim().1
    }

    pub fn is_sampled(&self, t: usize, ky: usize) -> bool {
        self.mask[[t, ky]]
    }

    pub fn sampled_lines(&self, t: usize) -> Vec<usize> {
        (0..self.ny()).filter(|&ky| self.mask[[t, ky]]).collect()
    }

    pub fn spec(&self) -> MaskSpec {
        MaskSpec { kind: self.kind, r: self.r, shear: self.shear, n_central: self.n_central }
    }
}

impl MaskSpec {
    pub fn build(&self, ny: usize, n_frames: usize) -> Result<SamplingMask> {
        match self.kind {
            MaskKind::Lattice => lattice_mask(ny, n_frames, self.r, self.shear),
            MaskKind::DenseLowres => dense_lowres_mask(ny, n_frames, self.n_central),
        }
    }
}

/// Uniform k-t lattice: `mask[t, ky] = (ky - shear*t) mod R == 0`.
///
/// `T` and `ny` must both be multiples of `R` so that the temporal-average
/// and cyclic-window identities used downstream hold exactly.
pub fn lattice_mask(ny: usize, n_frames: usize, r: usize, shear: usize) -> Result<SamplingMask> {
    if r == 0 {
        return Err(Error::Config("acceleration factor R must be >= 1".into()));
    }
    if n_frames % r != 0 {
        return Err(Error::Config(format!(
            "frame count {n_frames} is not a multiple of R={r}"
        )));
    }
    if ny % r != 0 {
        return Err(Error::Config(format!("ny={ny} is not a multiple of R={r}")));
    }
    // cyclic completeness (every line once per R consecutive frames) needs
    // the per-frame shift to generate all residues mod R
    if r > 1 && crate::util::gcd(shear % r, r) != 1 {
        return Err(Error::Config(format!(
            "shear={shear} shares a factor with R={r}; the lattice would never cover all lines"
        )));
    }
    let mask = Array2::from_shape_fn((n_frames, ny), |(t, ky)| {
        (ky + r * n_frames - (shear * t) % r) % r == 0
    });
    Ok(SamplingMask { mask, kind: MaskKind::Lattice, r, shear, n_central: 0 })
}

/// Fully-sampled mask (lattice with R = 1).
pub fn full_mask(ny: usize, n_frames: usize) -> SamplingMask {
    lattice_mask(ny, n_frames, 1, 0).expect("R=1 lattice is always valid")
}

/// Dense low-resolution band: the `n_central` ky lines centered on
/// `floor(ny/2)` are sampled in every frame, all others never.
pub fn dense_lowres_mask(ny: usize, n_frames: usize, n_central: usize) -> Result<SamplingMask> {
    if n_central == 0 || n_central > ny {
        return Err(Error::Config(format!("n_central={n_central} out of range 1..={ny}")));
    }
    let c = center_index(ny);
    let start = c - n_central / 2;
    let end = start + n_central; // exclusive
    let mask = Array2::from_shape_fn((n_frames, ny), |(_, ky)| ky >= start && ky < end);
    Ok(SamplingMask { mask, kind: MaskKind::DenseLowres, r: 1, shear: 0, n_central })
}

/// Central band bounds `(start, end_exclusive)` of a dense mask on `ny` lines.
pub fn central_band(ny: usize, n_central: usize) -> (usize, usize) {
    let c = center_index(ny);
    let start = c - n_central / 2;
    (start, start + n_central)
}

/// Multi-coil k-t measurements. Samples are exactly zero off-mask.
#[derive(Debug, Clone)]
pub struct KTData {
    /// axes (coil, time, ky, kx)
    pub samples: Array4<C32>,
    pub mask: SamplingMask,
    pub prewhitened: bool,
    pub meta: GridMeta,
}

impl KTData {
    pub fn n_coils(&self) -> usize {
        self.samples.dim().0
    }

    pub fn n_frames(&self) -> usize {
        self.samples.dim().1
    }

    pub fn ny(&self) -> usize {
        self.samples.dim().2
    }

    pub fn nx(&self) -> usize {
        self.samples.dim().3
    }

    /// Wrap a single-channel kt volume as a one-coil measurement set.
    pub fn from_single(k: &DynamicImage, mask: SamplingMask, prewhitened: bool) -> Result<Self> {
        if k.domain != Domain::Kt {
            return Err(Error::Domain("KTData::from_single expects a kt volume".into()));
        }
        let mut samples = k.data.clone().insert_axis(Axis(0));
        apply_mask4(&mut samples, &mask)?;
        Ok(KTData { samples, mask, prewhitened, meta: k.meta })
    }

    pub fn assert_mask_exactness(&self) -> Result<()> {
        for (c, coil) in self.samples.outer_iter().enumerate() {
            for ((t, ky, kx), v) in coil.indexed_iter() {
                if !self.mask.is_sampled(t, ky) && v.norm_sqr() != 0.0 {
                    return Err(Error::Numeric(format!(
                        "nonzero sample off-mask at (coil {c}, t {t}, ky {ky}, kx {kx})"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn apply_mask4(samples: &mut Array4<C32>, mask: &SamplingMask) -> Result<()> {
    let (_, t, ny, _) = samples.dim();
    if (t, ny) != mask.mask.dim() {
        return Err(Error::Shape(format!(
            "mask {}x{} does not match data {t}x{ny}",
            mask.n_frames(),
            mask.ny()
        )));
    }
    for mut coil in samples.outer_iter_mut() {
        for ((ti, ky), m) in mask.mask.indexed_iter() {
            if !*m {
                coil.slice_mut(ndarray::s![ti, ky, ..]).fill(C32::new(0.0, 0.0));
            }
        }
    }
    Ok(())
}

/// Forward-encode a subject: per coil `k_c = mask .* (FFT2(s_c .* truth) + n)`
/// with complex Gaussian noise of coil covariance `noise_sigma^2 * noise_cov`,
/// drawn only on sampled positions. Deterministic given `seed`.
pub fn encode(
    subject: &Subject,
    mask: &SamplingMask,
    noise_sigma: f64,
    seed: u64,
) -> Result<KTData> {
    let truth = &subject.truth;
    if truth.domain != Domain::Xt {
        return Err(Error::Domain("encode expects subject truth in xt".into()));
    }
    let (t_frames, ny, nx) = truth.data.dim();
    let nc = subject.coils.n_coils();
    let (sc, sy, sx) = subject.coils.sensitivities.dim();
    if (sc, sy, sx) != (nc, ny, nx) {
        return Err(Error::Shape("sensitivity maps do not match truth grid".into()));
    }
    if mask.mask.dim() != (t_frames, ny) {
        return Err(Error::Shape("mask does not match truth grid".into()));
    }

    // coil-weighted images, then per-frame spatial FFT
    let mut samples = Array4::<C32>::zeros((nc, t_frames, ny, nx));
    for c in 0..nc {
        let s = subject.coils.sensitivities.index_axis(Axis(0), c);
        let mut coil = samples.index_axis_mut(Axis(0), c);
        for t in 0..t_frames {
            let frame = truth.data.index_axis(Axis(0), t);
            let mut out = coil.index_axis_mut(Axis(0), t);
            for y in 0..ny {
                for x in 0..nx {
                    out[[y, x]] = frame[[y, x]] * s[[y, x]];
                }
            }
        }
    }
    fft_axis4(&mut samples, 2, FftDirection::Forward);
    fft_axis4(&mut samples, 3, FftDirection::Forward);

    // correlated complex noise on sampled entries, fixed draw order
    if noise_sigma > 0.0 {
        let l = cholesky(&subject.coils.noise_cov)?;
        let mut rng = stream_rng(seed, &[subject.subject_id as u64, STREAM_NOISE]);
        let normal = Normal::new(0.0f64, (0.5f64).sqrt()).unwrap();
        let mut z = vec![Complex64::new(0.0, 0.0); nc];
        for t in 0..t_frames {
            for ky in 0..ny {
                if !mask.is_sampled(t, ky) {
                    continue;
                }
                for kx in 0..nx {
                    for zc in z.iter_mut() {
                        *zc = Complex64::new(normal.sample(&mut rng), normal.sample(&mut rng));
                    }
                    for c in 0..nc {
                        let mut n = Complex64::new(0.0, 0.0);
                        for (j, zj) in z.iter().enumerate().take(c + 1) {
                            n += l[[c, j]] * zj;
                        }
                        let n = n * noise_sigma;
                        samples[[c, t, ky, kx]] += C32::new(n.re as f32, n.im as f32);
                    }
                }
            }
        }
    }

    apply_mask4(&mut samples, mask)?;
    Ok(KTData { samples, mask: mask.clone(), prewhitened: false, meta: truth.meta })
}

/// Whiten the coil axis of data and sensitivities with the inverse Cholesky
/// factor of the coil noise covariance; the returned model has identity
/// covariance.
pub fn prewhiten(k: &KTData, coils: &CoilModel) -> Result<(KTData, CoilModel)> {
    if k.prewhitened {
        return Err(Error::Domain("data is already prewhitened".into()));
    }
    let nc = k.n_coils();
    if coils.n_coils() != nc {
        return Err(Error::Shape("coil count mismatch between data and model".into()));
    }
    let l = cholesky(&coils.noise_cov)?;
    let linv = invert_lower(&l);
    let linv32: Array2<C32> = linv.mapv(|z| C32::new(z.re as f32, z.im as f32));

    let (_, t_frames, ny, nx) = k.samples.dim();
    let mut samples = Array4::<C32>::zeros((nc, t_frames, ny, nx));
    for c_out in 0..nc {
        let mut out = samples.index_axis_mut(Axis(0), c_out);
        for c_in in 0..=c_out {
            let w = linv32[[c_out, c_in]];
            if w.norm_sqr() == 0.0 {
                continue;
            }
            let src = k.samples.index_axis(Axis(0), c_in);
            out.zip_mut_with(&src, |o, &s| *o += w * s);
        }
    }

    let (_, sy, sx) = coils.sensitivities.dim();
    let mut sens = ndarray::Array3::<C32>::zeros((nc, sy, sx));
    for c_out in 0..nc {
        let mut out = sens.index_axis_mut(Axis(0), c_out);
        for c_in in 0..=c_out {
            let w = linv32[[c_out, c_in]];
            if w.norm_sqr() == 0.0 {
                continue;
            }
            let src = coils.sensitivities.index_axis(Axis(0), c_in);
            out.zip_mut_with(&src, |o, &s| *o += w * s);
        }
    }

    let eye = Array2::from_shape_fn((nc, nc), |(i, j)| {
        Complex64::new(if i == j { 1.0 } else { 0.0 }, 0.0)
    });
    Ok((
        KTData { samples, mask: k.mask.clone(), prewhitened: true, meta: k.meta },
        CoilModel { sensitivities: sens, noise_cov: eye },
    ))
}

/// The measured low-resolution ground truth of one subject: the dense
/// central-band kt data (prewhitened, zero-padded to the full grid), its
/// per-coil image volumes, and the SENSE coil combination.
#[derive(Debug, Clone)]
pub struct LowresGroundTruth {
    pub kt_dense: KTData,
    pub coil_images: CoilImages,
    pub combined: DynamicImage,
    pub coils: CoilModel,
}

/// Encode fully (R = 1), prewhiten, zero every ky line outside the central
/// band and inverse-transform. The result is the reference volume used as
/// the training target and the evaluation ground truth.
pub fn make_lowres_ground_truth(
    subject: &Subject,
    n_central: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<LowresGroundTruth> {
    let (t_frames, ny, _) = subject.truth.data.dim();
    let full = full_mask(ny, t_frames);
    let k_full = encode(subject, &full, noise_sigma, seed)?;
    let (k_white, coils_white) = prewhiten(&k_full, &subject.coils)?;

    let dense = dense_lowres_mask(ny, t_frames, n_central)?;
    let mut samples = k_white.samples;
    apply_mask4(&mut samples, &dense)?;
    let kt_dense = KTData { samples, mask: dense, prewhitened: true, meta: k_white.meta };

    let stack = CoilImages::new(kt_dense.samples.clone(), Domain::Kt, kt_dense.meta)?;
    let coil_images = coil_kt_to_xt(&stack)?;
    let combined = sense_combine(&coil_images, &coils_white, None)?;
    Ok(LowresGroundTruth { kt_dense, coil_images, combined, coils: coils_white })
}

/// Pointwise lattice mask application on fully-banded data; the result's
/// mask is the lattice.
pub fn retrospective_undersample(gt_kt: &KTData, lattice: &SamplingMask) -> Result<KTData> {
    if lattice.kind != MaskKind::Lattice {
        return Err(Error::Config("retrospective undersampling expects a lattice mask".into()));
    }
    if lattice.mask.dim() != gt_kt.mask.mask.dim() {
        return Err(Error::Shape("lattice grid does not match data grid".into()));
    }
    let mut samples = gt_kt.samples.clone();
    apply_mask4(&mut samples, lattice)?;
    Ok(KTData { samples, mask: lattice.clone(), prewhitened: gt_kt.prewhitened, meta: gt_kt.meta })
}

/// Undersample a coil-combined image volume with a lattice, producing
/// one-"coil" measurements (used to build the coil-combined dataset).
pub fn undersample_image(img: &DynamicImage, lattice: &SamplingMask) -> Result<KTData> {
    let k = crate::arrays::xt_to_kt(img)?;
    KTData::from_single(&k, lattice.clone(), true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_subject, PhantomConfig};
    use ndarray::Array3;
    use rand::Rng as _;

    fn desk_subject(seed: u64) -> Subject {
        let cfg = PhantomConfig { seed, ..PhantomConfig::desk() };
        generate_subject(&cfg, 0).unwrap()
    }

    /// Random-scene subject on a grid too small for the geometric phantom.
    fn tiny_subject(ny: usize, nx: usize, n_frames: usize, n_coils: usize, seed: u64) -> Subject {
        let cfg = PhantomConfig { ny, nx, n_frames, n_coils, seed, ..PhantomConfig::desk() };
        let coils = crate::phantom::synthesize_coils(&cfg, seed).unwrap();
        let mut rng = stream_rng(seed, &[0xbeef]);
        let data = Array3::from_shape_simple_fn((n_frames, ny, nx), || {
            C32::new(rng.random::<f32>() - 0.5, rng.random::<f32>() - 0.5)
        });
        let truth = DynamicImage::new(data, Domain::Xt, cfg.meta()).unwrap();
        crate::phantom::subject_from_parts(0, truth, coils, cfg)
    }

    #[test]
    fn lattice_definitional_cases() {
        let m = lattice_mask(8, 8, 8, 1).unwrap();
        for t in 0..8 {
            assert_eq!(m.sampled_lines(t), vec![t]);
        }
        // union over 8 frames covers all lines
        let mut covered = vec![false; 8];
        for t in 0..8 {
            for ky in m.sampled_lines(t) {
                covered[ky] = true;
            }
        }
        assert!(covered.iter().all(|&c| c));

        let full = lattice_mask(8, 8, 1, 0).unwrap();
        assert!(full.mask.iter().all(|&m| m));
    }

    #[test]
    fn lattice_windows_cover_exactly_once() {
        let m = lattice_mask(16, 16, 8, 1).unwrap();
        for t in 0..16 {
            assert_eq!(m.sampled_lines(t).len(), 2);
        }
        // exhaustive: every cyclic window of 8 frames covers all 16 lines once
        for t0 in 0..16 {
            let mut counts = vec![0usize; 16];
            for dt in 0..8 {
                let t = (t0 + dt) % 16;
                for ky in m.sampled_lines(t) {
                    counts[ky] += 1;
                }
            }
            assert!(counts.iter().all(|&c| c == 1), "window at {t0}: {counts:?}");
        }
    }

    #[test]
    fn lattice_rejects_bad_sizes() {
        assert!(matches!(lattice_mask(16, 12, 8, 1), Err(Error::Config(_))));
        assert!(matches!(lattice_mask(12, 16, 8, 1), Err(Error::Config(_))));
        // shear sharing a factor with R never covers all lines
        assert!(matches!(lattice_mask(16, 16, 8, 2), Err(Error::Config(_))));
        assert!(matches!(lattice_mask(16, 16, 8, 0), Err(Error::Config(_))));
        assert!(lattice_mask(16, 16, 8, 3).is_ok());
    }

    #[test]
    fn dense_band_placement() {
        let m = dense_lowres_mask(152, 2, 19).unwrap();
        let lines = m.sampled_lines(0);
        assert_eq!(lines, (67..=85).collect::<Vec<_>>());
        assert_eq!(central_band(152, 19), (67, 86));

        let all = dense_lowres_mask(10, 1, 10).unwrap();
        assert!(all.mask.iter().all(|&m| m));

        let one = dense_lowres_mask(10, 1, 1).unwrap();
        assert_eq!(one.sampled_lines(0), vec![5]);

        assert!(dense_lowres_mask(10, 1, 0).is_err());
        assert!(dense_lowres_mask(10, 1, 11).is_err());
    }

    #[test]
    fn noiseless_full_encode_roundtrips() {
        let cfg = PhantomConfig { n_coils: 1, seed: 3, ..PhantomConfig::desk() };
        let subject = generate_subject(&cfg, 0).unwrap();
        let mask = full_mask(cfg.ny, cfg.n_frames);
        let k = encode(&subject, &mask, 0.0, 0).unwrap();
        let img = crate::arrays::kt_to_xt(
            &DynamicImage::new(
                k.samples.index_axis(Axis(0), 0).to_owned(),
                Domain::Kt,
                k.meta,
            )
            .unwrap(),
        )
        .unwrap();
        assert!(crate::arrays::rel_error(&subject.truth.data, &img.data) < 1e-6);
    }

    #[test]
    fn all_false_mask_zeroes_samples() {
        let subject = desk_subject(5);
        let mut mask = full_mask(64, 32);
        mask.mask.fill(false);
        let k = encode(&subject, &mask, 0.3, 7).unwrap();
        assert!(k.samples.iter().all(|v| v.norm_sqr() == 0.0));
    }

    #[test]
    fn encode_is_deterministic_and_masked() {
        let subject = desk_subject(11);
        let mask = lattice_mask(64, 32, 8, 1).unwrap();
        let a = encode(&subject, &mask, 0.05, 123).unwrap();
        let b = encode(&subject, &mask, 0.05, 123).unwrap();
        for (x, y) in a.samples.iter().zip(b.samples.iter()) {
            assert_eq!(x, y);
        }
        a.assert_mask_exactness().unwrap();
    }

    /// Monte-Carlo noise covariance against the configured covariance.
    #[test]
    fn encode_noise_covariance_matches_model() {
        let mut subject = tiny_subject(8, 8, 8, 4, 1);
        let cfg = subject.config.clone();
        // zero scene: pure noise out
        subject.truth.data.fill(C32::new(0.0, 0.0));
        let mask = full_mask(cfg.ny, cfg.n_frames);
        // 8*8*8 = 512 sampled positions per run; 200 runs -> ~1e5 draws
        let nc = 4;
        let mut acc = Array2::<Complex64>::zeros((nc, nc));
        let mut n_draws = 0usize;
        for run in 0..200 {
            let k = encode(&subject, &mask, 1.0, 1000 + run).unwrap();
            for t in 0..cfg.n_frames {
                for ky in 0..cfg.ny {
                    for kx in 0..cfg.nx {
                        for i in 0..nc {
                            let vi = k.samples[[i, t, ky, kx]];
                            let vi = Complex64::new(vi.re as f64, vi.im as f64);
                            for j in 0..nc {
                                let vj = k.samples[[j, t, ky, kx]];
                                let vj = Complex64::new(vj.re as f64, vj.im as f64);
                                acc[[i, j]] += vi * vj.conj();
                            }
                        }
                        n_draws += 1;
                    }
                }
            }
        }
        let emp = acc.mapv(|z| z / n_draws as f64);
        let want = &subject.coils.noise_cov;
        for i in 0..nc {
            for j in 0..nc {
                let d = (emp[[i, j]] - want[[i, j]]).norm();
                assert!(
                    d < 0.05,
                    "cov[{i},{j}] off by {d:.3}: {} vs {}",
                    emp[[i, j]],
                    want[[i, j]]
                );
            }
        }
    }

    #[test]
    fn prewhiten_identity_covariance_is_noop() {
        let cfg = PhantomConfig { seed: 2, ..PhantomConfig::desk() };
        let mut subject = generate_subject(&cfg, 0).unwrap();
        let nc = subject.coils.n_coils();
        subject.coils.noise_cov = Array2::from_shape_fn((nc, nc), |(i, j)| {
            Complex64::new(if i == j { 1.0 } else { 0.0 }, 0.0)
        });
        let mask = lattice_mask(64, 32, 8, 1).unwrap();
        let k = encode(&subject, &mask, 0.01, 5).unwrap();
        let (kw, _) = prewhiten(&k, &subject.coils).unwrap();
        for (a, b) in k.samples.iter().zip(kw.samples.iter()) {
            assert!((a - b).norm() < 1e-6);
        }
    }

    #[test]
    fn prewhiten_diagonal_scales_coils() {
        // two coils, cov diag(4, 1): whitening halves coil 0
        let mut subject = tiny_subject(8, 8, 8, 2, 6);
        subject.coils.noise_cov = ndarray::array![
            [Complex64::new(4.0, 0.0), Complex64::new(0.0, 0.0)],
            [Complex64::new(0.0, 0.0), Complex64::new(1.0, 0.0)],
        ];
        let mask = full_mask(8, 8);
        let k = encode(&subject, &mask, 0.0, 0).unwrap();
        let (kw, cw) = prewhiten(&k, &subject.coils).unwrap();
        for t in 0..8 {
            for ky in 0..8 {
                for kx in 0..8 {
                    let orig = k.samples[[0, t, ky, kx]];
                    let white = kw.samples[[0, t, ky, kx]];
                    assert!((white - orig * 0.5).norm() < 1e-6);
                    let o1 = k.samples[[1, t, ky, kx]];
                    let w1 = kw.samples[[1, t, ky, kx]];
                    assert!((w1 - o1).norm() < 1e-6);
                }
            }
        }
        for i in 0..2 {
            for j in 0..2 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((cw.noise_cov[[i, j]] - Complex64::new(want, 0.0)).norm() < 1e-12);
            }
        }
        assert!(prewhiten(&kw, &cw).is_err(), "double prewhitening must fail");
    }

    /// Monte-Carlo: whitened noise has identity covariance.
    #[test]
    fn prewhitened_noise_covariance_is_identity() {
        let mut subject = tiny_subject(8, 8, 8, 4, 4);
        let cfg = subject.config.clone();
        subject.truth.data.fill(C32::new(0.0, 0.0));
        let mask = full_mask(cfg.ny, cfg.n_frames);
        let nc = 4;
        let mut acc = Array2::<Complex64>::zeros((nc, nc));
        let mut n_draws = 0usize;
        for run in 0..200 {
            let k = encode(&subject, &mask, 1.0, 9000 + run).unwrap();
            let (kw, _) = prewhiten(&k, &subject.coils).unwrap();
            for t in 0..cfg.n_frames {
                for ky in 0..cfg.ny {
                    for kx in 0..cfg.nx {
                        for i in 0..nc {
                            let vi = kw.samples[[i, t, ky, kx]];
                            let vi = Complex64::new(vi.re as f64, vi.im as f64);
                            for j in 0..nc {
                                let vj = kw.samples[[j, t, ky, kx]];
                                let vj = Complex64::new(vj.re as f64, vj.im as f64);
                                acc[[i, j]] += vi * vj.conj();
                            }
                        }
                        n_draws += 1;
                    }
                }
            }
        }
        let emp = acc.mapv(|z| z / n_draws as f64);
        for i in 0..nc {
            for j in 0..nc {
                if i == j {
                    assert!((emp[[i, i]].re - 1.0).abs() < 0.05, "var {}", emp[[i, i]]);
                } else {
                    assert!(
                        emp[[i, j]].norm() / (emp[[i, i]].re * emp[[j, j]].re).sqrt() < 0.05,
                        "off-diag [{i},{j}] = {}",
                        emp[[i, j]]
                    );
                }
            }
        }
    }

    #[test]
    fn lowres_gt_with_full_band_equals_full_encoding() {
        let subject = desk_subject(8);
        let gt = make_lowres_ground_truth(&subject, 64, 0.0, 0).unwrap();
        let full = encode(&subject, &full_mask(64, 32), 0.0, 0).unwrap();
        let (full_w, _) = prewhiten(&full, &subject.coils).unwrap();
        for (a, b) in gt.kt_dense.samples.iter().zip(full_w.samples.iter()) {
            assert!((a - b).norm() < 1e-5);
        }
    }

    #[test]
    fn lowres_gt_static_scene_is_time_constant() {
        let cfg = PhantomConfig {
            heart_pulsation_frac: 0.0,
            resp_amp_px: 0.0,
            seed: 9,
            ..PhantomConfig::desk()
        };
        let subject = generate_subject(&cfg, 0).unwrap();
        let gt = make_lowres_ground_truth(&subject, 9, 0.0, 0).unwrap();
        let first = gt.combined.data.index_axis(Axis(0), 0).to_owned();
        for frame in gt.combined.data.outer_iter() {
            for (a, b) in frame.iter().zip(first.iter()) {
                assert!((a - b).norm() < 1e-5);
            }
        }
    }

    #[test]
    fn band_limited_scene_survives_lowpass_exactly() {
        // build a scene from <= n_central ky harmonics directly in k-space
        let (t_frames, ny, nx) = (4, 32, 16);
        let n_central = 9;
        let (lo, hi) = central_band(ny, n_central);
        let mut k = Array3::<C32>::zeros((t_frames, ny, nx));
        let mut rng = crate::util::stream_rng(77, &[1]);
        for t in 0..t_frames {
            for ky in lo..hi {
                for kx in 0..nx {
                    k[[t, ky, kx]] =
                        C32::new(rng.random::<f32>() - 0.5, rng.random::<f32>() - 0.5);
                }
            }
        }
        let kimg = DynamicImage::new(k, Domain::Kt, GridMeta::default()).unwrap();
        let truth = crate::arrays::kt_to_xt(&kimg).unwrap();

        let cfg = PhantomConfig {
            ny,
            nx,
            n_frames: t_frames,
            n_coils: 1,
            seed: 1,
            ..PhantomConfig::desk()
        };
        let coils = crate::phantom::synthesize_coils(&cfg, 1).unwrap();
        let subject = crate::phantom::subject_from_parts(0, truth.clone(), coils, cfg);
        let gt = make_lowres_ground_truth(&subject, n_central, 0.0, 0).unwrap();
        assert!(crate::arrays::rel_error(&truth.data, &gt.combined.data) < 1e-6);
    }

    #[test]
    fn retrospective_undersampling_counts_and_coverage() {
        let subject = desk_subject(10);
        let gt = make_lowres_ground_truth(&subject, 9, 0.0, 0).unwrap();
        // R=1 leaves data unchanged
        let r1 = retrospective_undersample(&gt.kt_dense, &full_mask(64, 32)).unwrap();
        for (a, b) in r1.samples.iter().zip(gt.kt_dense.samples.iter()) {
            assert_eq!(a, b);
        }

        // R=8 on a 9-line band: ceil(9/8) = 2, so 1..=3 nonzero lines per frame
        for shear in [1usize, 3, 5] {
            let lat = lattice_mask(64, 32, 8, shear).unwrap();
            let ku = retrospective_undersample(&gt.kt_dense, &lat).unwrap();
            ku.assert_mask_exactness().unwrap();
            let (lo, hi) = central_band(64, 9);
            for t in 0..32 {
                let nonzero: usize = (lo..hi)
                    .filter(|&ky| {
                        lat.is_sampled(t, ky)
                            && (0..ku.n_coils())
                                .any(|c| ku.samples[[c, t, ky, 32]].norm_sqr() > 0.0)
                    })
                    .count();
                assert!((1..=3).contains(&nonzero), "frame {t}: {nonzero} lines");
            }
            // any 8 consecutive frames' masks cover the dense band
            for t0 in 0..32 {
                let mut covered = vec![false; 64];
                for dt in 0..8 {
                    let t = (t0 + dt) % 32;
                    for ky in lat.sampled_lines(t) {
                        covered[ky] = true;
                    }
                }
                assert!((lo..hi).all(|ky| covered[ky]));
            }
        }
    }
}
