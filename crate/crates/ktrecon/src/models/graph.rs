//! The differentiable model pipeline around the real-valued network cores:
//! complex/channel conversions, domain transforms, the data-consistency
//! layer, the temporal-average skip connection and the L1 loss, each with
//! its adjoint. Unitary transforms make every adjoint the corresponding
//! inverse transform.

use ndarray::{Array2, Array3, Array4};
use num_complex::Complex;
use rand::Rng;
use rustfft::FftNum;

use crate::acquisition::KTData;
use crate::arrays::{center_index, fft_axis4, FftDirection};
use crate::baselines::{broadcast_frames, sliding_window, temporal_average, zero_fill_recon};
use crate::error::{Error, Result};
use crate::nn::{FeatureMap, Float, ParamVisitor};
use crate::util::stream_rng;

use super::ctfnet::CtfNet;
use super::unet::{UNet, UNetCache};
use super::variant::{AuxInput, DcMode, ModelKind, ModelVariant, NetDim, ProcDomain};

const STREAM_MODEL_INIT: u64 = 11;

/// Everything a model consumes for one volume: assembled input channels in
/// the processing domain, the acquired k-t samples and mask, and (when the
/// skip connection is on) the temporal-average frame. Ground truth is not
/// part of this type; inference never sees it.
#[derive(Debug, Clone)]
pub struct ModelInput<T> {
    pub channels: FeatureMap<T>,
    pub k_acq: Array4<Complex<T>>,
    pub mask: Array2<bool>,
    pub tavg: Option<Array3<Complex<T>>>,
    /// patches disable data consistency (their k-space does not align with
    /// the acquisition mask)
    pub dc_enabled: bool,
    pub dims: (usize, usize, usize),
    pub n_coils: usize,
}

pub fn cast_input<T: Float + FftNum>(src: &ModelInput<f32>) -> ModelInput<T> {
    let conv = |v: f32| T::from_f64(v as f64).unwrap();
    ModelInput {
        channels: FeatureMap {
            data: src.channels.data.mapv(conv),
            shape: src.channels.shape.clone(),
        },
        k_acq: src.k_acq.mapv(|z| Complex::new(conv(z.re), conv(z.im))),
        mask: src.mask.clone(),
        tavg: src
            .tavg
            .as_ref()
            .map(|t| t.mapv(|z| Complex::new(conv(z.re), conv(z.im)))),
        dc_enabled: src.dc_enabled,
        dims: src.dims,
        n_coils: src.n_coils,
    }
}

/// Interleave a complex stack `(coil, t, y, x)` as real channel pairs
/// `(2*coil + {re, im})`.
pub fn stack_to_channels<T: Float>(stack: &Array4<Complex<T>>) -> FeatureMap<T> {
    let (nc, t, ny, nx) = stack.dim();
    let voxels = t * ny * nx;
    let mut fm = FeatureMap::zeros(2 * nc, &[t, ny, nx]);
    for c in 0..nc {
        let src = stack.index_axis(ndarray::Axis(0), c);
        let flat = src.as_slice().expect("contiguous stack");
        {
            let mut re = fm.data.row_mut(2 * c);
            for v in 0..voxels {
                re[v] = flat[v].re;
            }
        }
        let mut im = fm.data.row_mut(2 * c + 1);
        for v in 0..voxels {
            im[v] = flat[v].im;
        }
    }
    fm
}

/// Adjoint/inverse of [`stack_to_channels`].
pub fn channels_to_stack<T: Float>(
    fm: &FeatureMap<T>,
    dims: (usize, usize, usize),
) -> Result<Array4<Complex<T>>> {
    let (t, ny, nx) = dims;
    if fm.channels() % 2 != 0 {
        return Err(Error::Shape("channel count must be even (re/im pairs)".into()));
    }
    let nc = fm.channels() / 2;
    if fm.voxels() != t * ny * nx {
        return Err(Error::Shape("feature map does not match volume dims".into()));
    }
    let mut out = Array4::<Complex<T>>::zeros((nc, t, ny, nx));
    for c in 0..nc {
        let re = fm.data.row(2 * c);
        let im = fm.data.row(2 * c + 1);
        let mut dst = out.index_axis_mut(ndarray::Axis(0), c);
        let flat = dst.as_slice_mut().expect("contiguous stack");
        for v in 0..t * ny * nx {
            flat[v] = Complex::new(re[v], im[v]);
        }
    }
    Ok(out)
}

pub fn xt_to_kt4<T: FftNum + num_traits::Float>(d: &mut Array4<Complex<T>>) {
    fft_axis4(d, 2, FftDirection::Forward);
    fft_axis4(d, 3, FftDirection::Forward);
}

pub fn kt_to_xt4<T: FftNum + num_traits::Float>(d: &mut Array4<Complex<T>>) {
    fft_axis4(d, 2, FftDirection::Inverse);
    fft_axis4(d, 3, FftDirection::Inverse);
}

pub fn xt_to_xf4<T: FftNum + num_traits::Float>(d: &mut Array4<Complex<T>>) {
    fft_axis4(d, 1, FftDirection::Forward);
}

pub fn xf_to_xt4<T: FftNum + num_traits::Float>(d: &mut Array4<Complex<T>>) {
    fft_axis4(d, 1, FftDirection::Inverse);
}

pub(crate) fn sigmoid<T: Float>(theta: T) -> T {
    T::one() / (T::one() + (-theta).exp())
}

/// Data-consistency mix in k-space. `w` is ignored for forced/none modes.
pub fn dc_mix_forward<T: Float>(
    k_pred: &Array4<Complex<T>>,
    k_acq: &Array4<Complex<T>>,
    mask: &Array2<bool>,
    mode: DcMode,
    w: T,
) -> Array4<Complex<T>> {
    let mut out = k_pred.clone();
    if mode == DcMode::None {
        return out;
    }
    let (nc, t, ny, nx) = out.dim();
    for c in 0..nc {
        for ti in 0..t {
            for ky in 0..ny {
                if !mask[[ti, ky]] {
                    continue;
                }
                for kx in 0..nx {
                    let acq = k_acq[[c, ti, ky, kx]];
                    out[[c, ti, ky, kx]] = match mode {
                        DcMode::Forced => acq,
                        DcMode::Adjustable => {
                            let p = k_pred[[c, ti, ky, kx]];
                            Complex::new(
                                (T::one() - w) * p.re + w * acq.re,
                                (T::one() - w) * p.im + w * acq.im,
                            )
                        }
                        DcMode::None => unreachable!(),
                    };
                }
            }
        }
    }
    out
}

/// Backward of the mix: input cotangent for `k_pred` plus `dL/dw`.
pub fn dc_mix_backward<T: Float>(
    d_out: &Array4<Complex<T>>,
    k_pred: &Array4<Complex<T>>,
    k_acq: &Array4<Complex<T>>,
    mask: &Array2<bool>,
    mode: DcMode,
    w: T,
) -> (Array4<Complex<T>>, T) {
    let mut d_pred = d_out.clone();
    let mut dw = T::zero();
    if mode == DcMode::None {
        return (d_pred, dw);
    }
    let (nc, t, ny, nx) = d_pred.dim();
    for c in 0..nc {
        for ti in 0..t {
            for ky in 0..ny {
                if !mask[[ti, ky]] {
                    continue;
                }
                for kx in 0..nx {
                    let d = d_out[[c, ti, ky, kx]];
                    match mode {
                        DcMode::Forced => {
                            d_pred[[c, ti, ky, kx]] = Complex::new(T::zero(), T::zero());
                        }
                        DcMode::Adjustable => {
                            let p = k_pred[[c, ti, ky, kx]];
                            let a = k_acq[[c, ti, ky, kx]];
                            d_pred[[c, ti, ky, kx]] =
                                Complex::new((T::one() - w) * d.re, (T::one() - w) * d.im);
                            dw = dw + d.re * (a.re - p.re) + d.im * (a.im - p.im);
                        }
                        DcMode::None => unreachable!(),
                    }
                }
            }
        }
    }
    (d_pred, dw)
}

/// Add `sqrt(T) * tavg` into the f = 0 frame of an xf stack (equivalent to
/// adding the average to every xt frame under the unitary convention).
pub fn skip_add_temporal_avg<T: Float>(
    y_xf: &mut Array4<Complex<T>>,
    tavg: &Array3<Complex<T>>,
) -> Result<()> {
    let (nc, t, ny, nx) = y_xf.dim();
    if tavg.dim() != (nc, ny, nx) {
        return Err(Error::Shape("temporal-average frame does not match output stack".into()));
    }
    let f0 = center_index(t);
    let scale = T::from_f64(t as f64).unwrap().sqrt();
    for c in 0..nc {
        for y in 0..ny {
            for x in 0..nx {
                let add = tavg[[c, y, x]];
                let cur = y_xf[[c, f0, y, x]];
                y_xf[[c, f0, y, x]] =
                    Complex::new(cur.re + scale * add.re, cur.im + scale * add.im);
            }
        }
    }
    Ok(())
}

/// Mean L1 over real and imaginary parts plus its gradient (stored as a
/// complex array of per-component signs / N).
pub fn l1_loss_and_grad<T: Float>(
    y: &Array4<Complex<T>>,
    target: &Array4<Complex<T>>,
) -> Result<(T, Array4<Complex<T>>)> {
    if y.dim() != target.dim() {
        return Err(Error::Shape(format!(
            "loss shapes differ: {:?} vs {:?}",
            y.dim(),
            target.dim()
        )));
    }
    let n = T::from_usize(y.len()).unwrap();
    let mut loss = T::zero();
    let mut grad = Array4::<Complex<T>>::zeros(y.dim());
    for (g, (a, b)) in grad.iter_mut().zip(y.iter().zip(target.iter())) {
        let dre = a.re - b.re;
        let dim = a.im - b.im;
        loss = loss + dre.abs() + dim.abs();
        *g = Complex::new(sign(dre) / n, sign(dim) / n);
    }
    Ok((loss / n, grad))
}

fn sign<T: Float>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Assemble the network input for one undersampled measurement set:
/// zero-filled reconstruction channels (per coil, re/im), optionally an
/// auxiliary sliding-window or broadcast temporal-average channel pair, all
/// transformed to the variant's processing domain; plus the raw acquired
/// samples for data consistency and the temporal-average frame for the skip
/// connection.
pub fn assemble_input(variant: &ModelVariant, k_under: &KTData) -> Result<ModelInput<f32>> {
    variant.validate()?;
    let zf = zero_fill_recon(k_under)?;
    let t_frames = zf.n_frames();
    let dims = (t_frames, zf.ny(), zf.nx());
    let n_coils = zf.n_coils();

    let to_domain = |stack: &crate::arrays::CoilImages| -> Result<Array4<Complex<f32>>> {
        let mut data = stack.data.clone();
        if variant.domain == ProcDomain::Xf {
            xt_to_xf4(&mut data);
        }
        Ok(data)
    };

    let mut channels = stack_to_channels(&to_domain(&zf)?);
    match variant.aux_input {
        AuxInput::None => {}
        AuxInput::SlidingWindow => {
            let sw = sliding_window(k_under)?;
            let aux = stack_to_channels(&to_domain(&sw)?);
            channels = crate::nn::concat(&channels, &aux)?;
        }
        AuxInput::TemporalAverage => {
            let ta = broadcast_frames(&temporal_average(k_under)?, t_frames)?;
            let aux = stack_to_channels(&to_domain(&ta)?);
            channels = crate::nn::concat(&channels, &aux)?;
        }
    }

    let tavg = if variant.skip_temporal_avg {
        let ta = temporal_average(k_under)?;
        Some(ta.data.index_axis(ndarray::Axis(1), 0).to_owned())
    } else {
        None
    };

    Ok(ModelInput {
        channels,
        k_acq: k_under.samples.clone(),
        mask: k_under.mask.mask.clone(),
        tavg,
        dc_enabled: true,
        dims,
        n_coils,
    })
}

/// A trainable model instance (network core plus DC parameter).
pub enum Model<T> {
    UNet(UNetModel<T>),
    Iterative(CtfNet<T>),
}

pub enum ModelCache<T> {
    UNet(UNetForwardCache<T>),
    Iterative(super::ctfnet::CtfCache<T>),
}

impl<T: Float + FftNum> Model<T> {
    pub fn new(variant: &ModelVariant, n_coils: usize, seed: u64) -> Result<Self> {
        variant.validate()?;
        let mut rng = stream_rng(seed, &[STREAM_MODEL_INIT]);
        Ok(match variant.kind {
            ModelKind::UNet => Model::UNet(UNetModel::new(variant, n_coils, &mut rng)?),
            ModelKind::IterativeTf => {
                Model::Iterative(CtfNet::new(variant, n_coils, &mut rng)?)
            }
        })
    }

    pub fn variant(&self) -> &ModelVariant {
        match self {
            Model::UNet(m) => &m.variant,
            Model::Iterative(m) => &m.variant,
        }
    }

    pub fn n_coils(&self) -> usize {
        match self {
            Model::UNet(m) => m.n_coils,
            Model::Iterative(m) => m.n_coils,
        }
    }

    /// Forward pass returning the processing-domain output stack.
    pub fn forward(&self, input: &ModelInput<T>) -> Result<(Array4<Complex<T>>, ModelCache<T>)> {
        match self {
            Model::UNet(m) => {
                let (y, c) = m.forward(input)?;
                Ok((y, ModelCache::UNet(c)))
            }
            Model::Iterative(m) => {
                let (y, c) = m.forward(input)?;
                Ok((y, ModelCache::Iterative(c)))
            }
        }
    }

    /// Backpropagate the processing-domain cotangent, accumulating
    /// parameter gradients.
    pub fn backward(
        &mut self,
        input: &ModelInput<T>,
        cache: &ModelCache<T>,
        d_out: &Array4<Complex<T>>,
    ) -> Result<()> {
        match (self, cache) {
            (Model::UNet(m), ModelCache::UNet(c)) => m.backward(input, c, d_out),
            (Model::Iterative(m), ModelCache::Iterative(c)) => m.backward(input, c, d_out),
            _ => Err(Error::Shape("model/cache kind mismatch".into())),
        }
    }

    /// Convert a processing-domain output to an xt stack.
    pub fn output_to_xt(&self, y: &Array4<Complex<T>>) -> Array4<Complex<T>> {
        let mut out = y.clone();
        if self.variant().domain == ProcDomain::Xf {
            xf_to_xt4(&mut out);
        }
        out
    }

    pub fn zero_grad(&mut self) {
        match self {
            Model::UNet(m) => m.zero_grad(),
            Model::Iterative(m) => m.zero_grad(),
        }
    }

    pub fn visit_params(&mut self, v: &mut dyn ParamVisitor<T>) {
        match self {
            Model::UNet(m) => m.visit_params(v),
            Model::Iterative(m) => m.visit_params(v),
        }
    }
}

pub struct UNetModel<T> {
    pub variant: ModelVariant,
    pub n_coils: usize,
    pub unet: UNet<T>,
    pub theta: T,
    pub gtheta: T,
}

pub struct UNetForwardCache<T> {
    unet: Vec<UNetCache<T>>,
    k_pred: Option<Array4<Complex<T>>>,
}

impl<T: Float + FftNum> UNetModel<T> {
    pub fn new(variant: &ModelVariant, n_coils: usize, rng: &mut impl Rng) -> Result<Self> {
        let rank = match variant.dim {
            NetDim::Two => 2,
            NetDim::Three => 3,
        };
        let unet = UNet::new(
            variant.in_channels(n_coils),
            variant.out_channels(n_coils),
            variant.base_channels,
            variant.depth,
            rank,
            rng,
        );
        Ok(UNetModel {
            variant: variant.clone(),
            n_coils,
            unet,
            theta: T::zero(),
            gtheta: T::zero(),
        })
    }

    fn run_core(&self, input: &ModelInput<T>) -> Result<(FeatureMap<T>, Vec<UNetCache<T>>)> {
        let (t, ny, nx) = input.dims;
        match self.variant.dim {
            NetDim::Three => {
                let (y, c) = self.unet.forward(&input.channels)?;
                Ok((y, vec![c]))
            }
            NetDim::Two => {
                // frames are independent samples
                let fsize = ny * nx;
                let mut out = FeatureMap::zeros(self.variant.out_channels(self.n_coils), &[t, ny, nx]);
                let mut caches = Vec::with_capacity(t);
                for ti in 0..t {
                    let frame = FeatureMap {
                        data: input
                            .channels
                            .data
                            .slice(ndarray::s![.., ti * fsize..(ti + 1) * fsize])
                            .to_owned(),
                        shape: vec![ny, nx],
                    };
                    let (y, c) = self.unet.forward(&frame)?;
                    out.data
                        .slice_mut(ndarray::s![.., ti * fsize..(ti + 1) * fsize])
                        .assign(&y.data);
                    caches.push(c);
                }
                Ok((out, caches))
            }
        }
    }

    pub fn forward(
        &self,
        input: &ModelInput<T>,
    ) -> Result<(Array4<Complex<T>>, UNetForwardCache<T>)> {
        let (y_fm, unet_caches) = self.run_core(input)?;
        let mut y = channels_to_stack(&y_fm, input.dims)?;

        if self.variant.skip_temporal_avg {
            let tavg = input
                .tavg
                .as_ref()
                .ok_or_else(|| Error::Config("skip connection needs a temporal average".into()))?;
            skip_add_temporal_avg(&mut y, tavg)?;
        }

        let mut k_pred_cache = None;
        if self.variant.dc_mode != DcMode::None && input.dc_enabled {
            if self.variant.domain == ProcDomain::Xf {
                xf_to_xt4(&mut y);
            }
            xt_to_kt4(&mut y);
            let w = sigmoid(self.theta);
            let mixed = dc_mix_forward(&y, &input.k_acq, &input.mask, self.variant.dc_mode, w);
            if self.variant.dc_mode == DcMode::Adjustable {
                k_pred_cache = Some(y);
            }
            y = mixed;
            kt_to_xt4(&mut y);
            if self.variant.domain == ProcDomain::Xf {
                xt_to_xf4(&mut y);
            }
        }

        Ok((y, UNetForwardCache { unet: unet_caches, k_pred: k_pred_cache }))
    }

    pub fn backward(
        &mut self,
        input: &ModelInput<T>,
        cache: &UNetForwardCache<T>,
        d_out: &Array4<Complex<T>>,
    ) -> Result<()> {
        let mut d = d_out.clone();
        if self.variant.dc_mode != DcMode::None && input.dc_enabled {
            if self.variant.domain == ProcDomain::Xf {
                xf_to_xt4(&mut d);
            }
            xt_to_kt4(&mut d);
            let w = sigmoid(self.theta);
            let zero = Array4::zeros(d.dim());
            let k_pred = cache.k_pred.as_ref().unwrap_or(&zero);
            let (d_pred, dw) =
                dc_mix_backward(&d, k_pred, &input.k_acq, &input.mask, self.variant.dc_mode, w);
            if self.variant.dc_mode == DcMode::Adjustable {
                self.gtheta = self.gtheta + dw * w * (T::one() - w);
            }
            d = d_pred;
            kt_to_xt4(&mut d);
            if self.variant.domain == ProcDomain::Xf {
                xt_to_xf4(&mut d);
            }
        }
        // skip connection: pass-through
        let d_fm = stack_to_channels(&d);

        let (t, ny, nx) = input.dims;
        match self.variant.dim {
            NetDim::Three => {
                self.unet.backward(&cache.unet[0], &d_fm)?;
            }
            NetDim::Two => {
                let fsize = ny * nx;
                for ti in 0..t {
                    let frame = FeatureMap {
                        data: d_fm
                            .data
                            .slice(ndarray::s![.., ti * fsize..(ti + 1) * fsize])
                            .to_owned(),
                        shape: vec![ny, nx],
                    };
                    self.unet.backward(&cache.unet[ti], &frame)?;
                }
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.unet.zero_grad();
        self.gtheta = T::zero();
    }

    pub fn visit_params(&mut self, v: &mut dyn ParamVisitor<T>) {
        self.unet.visit_params("unet", v);
        if self.variant.dc_mode == DcMode::Adjustable {
            let theta = std::slice::from_mut(&mut self.theta);
            let gtheta = std::slice::from_mut(&mut self.gtheta);
            v.visit("dc.theta", theta, gtheta);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;


    #[test]
    fn channel_conversions_are_inverse_permutations() {
        let mut rng = stream_rng(3, &[9]);
        use rand::Rng as _;
        let stack = Array4::from_shape_simple_fn((2, 3, 4, 5), || {
            Complex::new(rng.random::<f32>() - 0.5, rng.random::<f32>() - 0.5)
        });
        let fm = stack_to_channels(&stack);
        assert_eq!(fm.channels(), 4);
        let back = channels_to_stack(&fm, (3, 4, 5)).unwrap();
        for (a, b) in stack.iter().zip(back.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn dc_mix_scalar_cases() {
        // one coil, one frame, one sampled bin: pred 2, acq 4
        let mut k_pred = Array4::<Complex<f64>>::zeros((1, 1, 1, 1));
        k_pred[[0, 0, 0, 0]] = Complex::new(2.0, 0.0);
        let mut k_acq = Array4::<Complex<f64>>::zeros((1, 1, 1, 1));
        k_acq[[0, 0, 0, 0]] = Complex::new(4.0, 0.0);
        let mask = Array2::from_elem((1, 1), true);

        let forced = dc_mix_forward(&k_pred, &k_acq, &mask, DcMode::Forced, 0.5);
        assert_eq!(forced[[0, 0, 0, 0]].re, 4.0);
        let half = dc_mix_forward(&k_pred, &k_acq, &mask, DcMode::Adjustable, 0.5);
        assert_eq!(half[[0, 0, 0, 0]].re, 3.0);
        let none = dc_mix_forward(&k_pred, &k_acq, &mask, DcMode::None, 0.5);
        assert_eq!(none[[0, 0, 0, 0]].re, 2.0);
        // w -> 0 equals none mode
        let w0 = dc_mix_forward(&k_pred, &k_acq, &mask, DcMode::Adjustable, 0.0);
        assert_eq!(w0[[0, 0, 0, 0]].re, 2.0);
        // w -> 1 equals forced mode
        let w1 = dc_mix_forward(&k_pred, &k_acq, &mask, DcMode::Adjustable, 1.0);
        assert_eq!(w1[[0, 0, 0, 0]].re, 4.0);
    }

    #[test]
    fn l1_loss_matches_hand_computation() {
        let mut y = Array4::<Complex<f64>>::zeros((1, 1, 2, 2));
        let target = Array4::<Complex<f64>>::zeros((1, 1, 2, 2));
        y[[0, 0, 0, 0]] = Complex::new(3.0, 4.0);
        let (loss, grad) = l1_loss_and_grad(&y, &target).unwrap();
        assert!((loss - 7.0 / 4.0).abs() < 1e-12);
        assert_eq!(grad[[0, 0, 0, 0]], Complex::new(0.25, 0.25));
        assert_eq!(grad[[0, 0, 1, 1]], Complex::new(0.0, 0.0));

        // symmetry
        let (l_ab, _) = l1_loss_and_grad(&y, &target).unwrap();
        let (l_ba, _) = l1_loss_and_grad(&target, &y).unwrap();
        assert_eq!(l_ab, l_ba);
        // zero at equality
        let (l_aa, _) = l1_loss_and_grad(&y, &y).unwrap();
        assert_eq!(l_aa, 0.0);
    }

    #[test]
    fn skip_add_equals_framewise_addition_in_xt() {
        let mut rng = stream_rng(4, &[2]);
        use rand::Rng as _;
        let (nc, t, ny, nx) = (2usize, 8usize, 4usize, 4usize);
        let a = Array4::from_shape_simple_fn((nc, t, ny, nx), || {
            Complex::new(rng.random::<f32>() - 0.5, rng.random::<f32>() - 0.5)
        });
        let m = Array3::from_shape_simple_fn((nc, ny, nx), || {
            Complex::new(rng.random::<f32>() - 0.5, rng.random::<f32>() - 0.5)
        });
        // route 1: add sqrt(T) m at f=0 in xf, then transform to xt
        let mut a_xf = a.clone();
        xt_to_xf4(&mut a_xf);
        skip_add_temporal_avg(&mut a_xf, &m).unwrap();
        let mut route1 = a_xf;
        xf_to_xt4(&mut route1);
        // route 2: add m to every xt frame
        let mut route2 = a.clone();
        for c in 0..nc {
            for ti in 0..t {
                for y in 0..ny {
                    for x in 0..nx {
                        route2[[c, ti, y, x]] += m[[c, y, x]];
                    }
                }
            }
        }
        for (u, v) in route1.iter().zip(route2.iter()) {
            assert!((u - v).norm() < 1e-5, "{u} vs {v}");
        }
    }

    #[test]
    fn tavg_zero_skip_is_identity() {
        let mut y = Array4::<Complex<f32>>::zeros((1, 4, 2, 2));
        y[[0, 1, 0, 1]] = Complex::new(1.0, -2.0);
        let orig = y.clone();
        let tavg = Array3::<Complex<f32>>::zeros((1, 2, 2));
        skip_add_temporal_avg(&mut y, &tavg).unwrap();
        for (a, b) in y.iter().zip(orig.iter()) {
            assert_eq!(a, b);
        }
    }
}
