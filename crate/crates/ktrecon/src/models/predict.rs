//! Inference: assemble inputs from measurements only, run the network, map
//! the output back to xt and coil-combine multi-coil predictions.
//!
//! The signature admits nothing but `(samples, mask, coil maps)`; ground
//! truth is structurally unreachable from this path.

use ndarray::Axis;

use crate::acquisition::KTData;
use crate::arrays::{CoilImages, Domain, DynamicImage};
use crate::error::{Error, Result};
use crate::phantom::CoilModel;
use crate::sense::sense_combine;

use super::graph::{assemble_input, Model};
use super::variant::CoilMode;

/// Reconstruct one volume from undersampled measurements with a trained (or
/// freshly initialized) model. Multi-coil outputs are SENSE-combined.
pub fn model_predict(
    model: &Model<f32>,
    k_under: &KTData,
    coils: &CoilModel,
) -> Result<DynamicImage> {
    let variant = model.variant();
    if k_under.n_coils() != model.n_coils() {
        return Err(Error::Shape(format!(
            "model was built for {} coils, input has {} (coil mode {:?})",
            model.n_coils(),
            k_under.n_coils(),
            variant.coil_mode
        )));
    }
    if variant.coil_mode == CoilMode::Combined && k_under.n_coils() != 1 {
        return Err(Error::Config(
            "coil-combined model applied to multi-coil input; combine the data first".into(),
        ));
    }
    let input = assemble_input(variant, k_under)?;
    let (y, _) = model.forward(&input)?;
    let y_xt = model.output_to_xt(&y);

    match variant.coil_mode {
        CoilMode::Combined => {
            let data = y_xt.index_axis(Axis(0), 0).to_owned();
            DynamicImage::new(data, Domain::Xt, k_under.meta)
        }
        CoilMode::Multi => {
            let stack = CoilImages::new(y_xt, Domain::Xt, k_under.meta)?;
            sense_combine(&stack, coils, None)
        }
    }
}

/// Forced-DC contract: at sampled kt bins the prediction equals the
/// acquired data (up to transform round-trip error). Exposed for tests and
/// the acceptance suite.
pub fn dc_residual_at_sampled_bins(pred: &DynamicImage, k_acq: &KTData) -> Result<f64> {
    let k_pred = crate::arrays::xt_to_kt(pred)?;
    if k_acq.n_coils() != 1 {
        return Err(Error::Shape("dc residual check expects combined (1-coil) data".into()));
    }
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for ((t, ky, kx), v) in k_pred.data.indexed_iter() {
        if k_acq.mask.is_sampled(t, ky) {
            let a = k_acq.samples[[0, t, ky, kx]];
            num += (v - a).norm_sqr() as f64;
            den += a.norm_sqr() as f64;
        }
    }
    Ok((num / den.max(1e-30)).sqrt())
}

/// Multi-coil version of [`dc_residual_at_sampled_bins`].
pub fn dc_residual_multicoil(pred_coils: &CoilImages, k_acq: &KTData) -> Result<f64> {
    let k_pred = crate::arrays::coil_xt_to_kt(pred_coils)?;
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for ((c, t, ky, kx), v) in k_pred.data.indexed_iter() {
        if k_acq.mask.is_sampled(t, ky) {
            let a = k_acq.samples[[c, t, ky, kx]];
            num += (v - a).norm_sqr() as f64;
            den += a.norm_sqr() as f64;
        }
    }
    Ok((num / den.max(1e-30)).sqrt())
}

/// Per-coil xt prediction for multi-coil models (pre-combination), used by
/// data-consistency contract checks.
pub fn model_predict_coils(model: &Model<f32>, k_under: &KTData) -> Result<CoilImages> {
    let input = assemble_input(model.variant(), k_under)?;
    let (y, _) = model.forward(&input)?;
    let y_xt = model.output_to_xt(&y);
    CoilImages::new(y_xt, Domain::Xt, k_under.meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acquisition::{
        lattice_mask, make_lowres_ground_truth, retrospective_undersample, undersample_image,
        SamplingMask,
    };
    use crate::models::variant::variant_by_name;
    use crate::phantom::{generate_subject, PhantomConfig};

    fn combined_input(seed: u64) -> (KTData, CoilModel) {
        let cfg = PhantomConfig { seed, ..PhantomConfig::desk() };
        let s = generate_subject(&cfg, 0).unwrap();
        let gt = make_lowres_ground_truth(&s, 9, 0.0, 0).unwrap();
        let lat = lattice_mask(64, 32, 8, 1).unwrap();
        let ku = undersample_image(&gt.combined, &lat).unwrap();
        (ku, CoilModel::uniform_single(64, 64))
    }

    #[test]
    fn forced_dc_prediction_matches_acquired_bins() {
        let (ku, coils) = combined_input(40);
        let mut variant = variant_by_name("3d_xf_skip_dcf").unwrap();
        variant.base_channels = 4;
        let model = Model::<f32>::new(&variant, 1, 7).unwrap();
        let pred = model_predict(&model, &ku, &coils).unwrap();
        let res = dc_residual_at_sampled_bins(&pred, &ku).unwrap();
        assert!(res < 1e-4, "forced-DC residual {res:.2e}");
    }

    #[test]
    fn untrained_prediction_is_deterministic() {
        let (ku, coils) = combined_input(41);
        let mut variant = variant_by_name("3d_xt").unwrap();
        variant.base_channels = 4;
        let m1 = Model::<f32>::new(&variant, 1, 7).unwrap();
        let m2 = Model::<f32>::new(&variant, 1, 7).unwrap();
        let p1 = model_predict(&m1, &ku, &coils).unwrap();
        let p2 = model_predict(&m2, &ku, &coils).unwrap();
        for (a, b) in p1.data.iter().zip(p2.data.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn two_d_models_are_frame_equivariant() {
        let (ku, coils) = combined_input(42);
        let mut variant = variant_by_name("2d_dcf").unwrap();
        variant.base_channels = 4;
        let model = Model::<f32>::new(&variant, 1, 9).unwrap();
        let pred = model_predict(&model, &ku, &coils).unwrap();

        // cyclically rotate frames of samples and mask together
        let t_frames = ku.n_frames();
        let shift = 5usize;
        let mut samples = ku.samples.clone();
        let mut mask_arr = ku.mask.mask.clone();
        for t in 0..t_frames {
            let src = (t + shift) % t_frames;
            samples
                .slice_mut(ndarray::s![.., t, .., ..])
                .assign(&ku.samples.slice(ndarray::s![.., src, .., ..]));
            for ky in 0..ku.ny() {
                mask_arr[[t, ky]] = ku.mask.mask[[src, ky]];
            }
        }
        let rotated = KTData {
            samples,
            mask: SamplingMask { mask: mask_arr, ..ku.mask.clone() },
            prewhitened: ku.prewhitened,
            meta: ku.meta,
        };
        let pred_rot = model_predict(&model, &rotated, &coils).unwrap();
        for t in 0..t_frames {
            let src = (t + shift) % t_frames;
            for y in 0..ku.ny() {
                for x in 0..ku.nx() {
                    let a = pred_rot.data[[t, y, x]];
                    let b = pred.data[[src, y, x]];
                    assert!(
                        (a - b).norm() < 1e-5,
                        "frame equivariance broken at t={t} ({a} vs {b})"
                    );
                }
            }
        }
    }

    #[test]
    fn coil_mode_mismatch_is_an_error() {
        let cfg = PhantomConfig { seed: 43, ..PhantomConfig::desk() };
        let s = generate_subject(&cfg, 0).unwrap();
        let gt = make_lowres_ground_truth(&s, 9, 0.0, 0).unwrap();
        let lat = lattice_mask(64, 32, 8, 1).unwrap();
        let ku_mc = retrospective_undersample(&gt.kt_dense, &lat).unwrap();
        let mut variant = variant_by_name("3d_xf_skip_dcf").unwrap();
        variant.base_channels = 4;
        let model = Model::<f32>::new(&variant, 1, 7).unwrap();
        assert!(model_predict(&model, &ku_mc, &gt.coils).is_err());
    }
}
