//! Subject-level dataset splitting, the L1 objective, Adam with per-epoch
//! exponential learning-rate decay, the deterministic training loop with
//! best-validation checkpoint selection, and spatial patch sampling for the
//! iterative network.

use ndarray::{Array2, Array4};
use num_complex::Complex;
use rand::Rng;

use crate::acquisition::KTData;
use crate::arrays::DynamicImage;
use crate::error::{Error, Result};
use crate::evaluation::{nmse, ssim, BodyMask};
use crate::models::checkpoint::Checkpoint;
use crate::models::graph::{l1_loss_and_grad, Model, ModelInput};
use crate::models::predict::model_predict;
use crate::models::variant::ModelVariant;
use crate::nn::{FeatureMap, ParamVisitor};
use crate::phantom::CoilModel;
use crate::util::{fingerprint, stream_rng};

const STREAM_SPLIT: u64 = 21;
const STREAM_ORDER: u64 = 22;
const STREAM_PATCH: u64 = 23;

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct SplitSpec {
    pub test_frac: f64,
    pub val_frac_of_rest: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { test_frac: 0.20, val_frac_of_rest: 0.20 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Splits {
    pub train: Vec<u32>,
    pub val: Vec<u32>,
    pub test: Vec<u32>,
}

impl Splits {
    pub fn assert_disjoint(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for id in self.train.iter().chain(&self.val).chain(&self.test) {
            if !seen.insert(*id) {
                return Err(Error::Data(format!("subject {id} appears in two splits")));
            }
        }
        Ok(())
    }
}

/// Deterministic subject-level split: `ceil(test_frac * n)` subjects to
/// test, `ceil(val_frac * rest)` to validation, remainder to training.
pub fn split_dataset(subject_ids: &[u32], spec: &SplitSpec, seed: u64) -> Result<Splits> {
    if subject_ids.len() < 5 {
        return Err(Error::Config(format!(
            "need at least 5 subjects to split, got {}",
            subject_ids.len()
        )));
    }
    let mut ids = subject_ids.to_vec();
    let mut rng = stream_rng(seed, &[STREAM_SPLIT]);
    // Fisher-Yates
    for i in (1..ids.len()).rev() {
        let j = rng.random_range(0..=i);
        ids.swap(i, j);
    }
    let n = ids.len();
    let n_test = (spec.test_frac * n as f64).ceil() as usize;
    let rest = n - n_test;
    let n_val = (spec.val_frac_of_rest * rest as f64).ceil() as usize;
    let test = ids[..n_test].to_vec();
    let val = ids[n_test..n_test + n_val].to_vec();
    let train = ids[n_test + n_val..].to_vec();
    let splits = Splits { train, val, test };
    splits.assert_disjoint()?;
    Ok(splits)
}

/// Mean over all elements of `|Re d| + |Im d|` between two complex volumes.
pub fn l1_loss(pred: &DynamicImage, target: &DynamicImage) -> Result<f64> {
    if pred.data.dim() != target.data.dim() {
        return Err(Error::Shape("l1_loss shapes differ".into()));
    }
    let n = pred.data.len() as f64;
    let mut acc = 0.0f64;
    for (a, b) in pred.data.iter().zip(target.data.iter()) {
        acc += ((a.re - b.re).abs() + (a.im - b.im).abs()) as f64;
    }
    Ok(acc / n)
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay: f64,
    /// volumes (or patches) per optimizer step
    pub batch_size: usize,
    pub seed: u64,
    /// spatial patch edge for the iterative network; `None` trains on full
    /// volumes
    pub patch_size: Option<usize>,
    pub patches_per_volume: usize,
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            lr: 1e-4,
            lr_decay: 0.95,
            batch_size: 4,
            seed: 0,
            patch_size: None,
            patches_per_volume: 4,
            deterministic: true,
        }
    }
}

impl TrainConfig {
    /// Protocol for the iterative time-frequency network: longer schedule,
    /// patch-based batches.
    pub fn iterative_default() -> Self {
        TrainConfig { epochs: 150, patch_size: Some(32), ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.lr_decay <= 0.0 || self.lr_decay > 1.0 {
            return Err(Error::Config("lr decay must be in (0, 1]".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        Ok(())
    }

    pub fn fingerprint(&self, variant: &ModelVariant) -> u64 {
        let blob = format!(
            "{}|{}",
            serde_json::to_string(self).unwrap_or_default(),
            serde_json::to_string(variant).unwrap_or_default()
        );
        fingerprint(blob.as_bytes())
    }
}

/// `lr(epoch) = lr * decay^epoch`, exactly.
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.lr * cfg.lr_decay.powi(epoch as i32)
}

/// One training example: assembled input and the processing-domain target.
pub struct TrainSample {
    pub subject_id: u32,
    pub input: ModelInput<f32>,
    pub target: Array4<Complex<f32>>,
}

/// One validation case, scored through the full prediction path.
pub struct ValCase {
    pub subject_id: u32,
    pub k_under: KTData,
    pub coils: CoilModel,
    pub gt: DynamicImage,
    pub mask: BodyMask,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub train_l1: f64,
    pub val_nmse: f64,
    pub val_ssim: f64,
    pub lr: f64,
}

pub fn log_to_csv(rows: &[TrainLogRow]) -> String {
    let mut out = String::from("epoch,train_l1,val_nmse,val_ssim,lr\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.8e},{:.8e},{:.6},{:.8e}\n",
            r.epoch, r.train_l1, r.val_nmse, r.val_ssim, r.lr
        ));
    }
    out
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<TrainLogRow>,
    pub best_epoch: usize,
    pub best_val_nmse: f64,
}

/// Adam with bias correction; state is keyed by parameter visit order.
pub struct Adam {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: usize,
    beta1: f32,
    beta2: f32,
    eps: f32,
}

impl Adam {
    pub fn new() -> Self {
        Adam { m: vec![], v: vec![], t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn step(&mut self, model: &mut Model<f32>, lr: f32) {
        self.t += 1;
        let bias1 = 1.0 - self.beta1.powi(self.t as i32);
        let bias2 = 1.0 - self.beta2.powi(self.t as i32);
        struct V<'a> {
            opt: &'a mut Adam,
            idx: usize,
            lr: f32,
            bias1: f32,
            bias2: f32,
        }
        impl ParamVisitor<f32> for V<'_> {
            fn visit(&mut self, _name: &str, param: &mut [f32], grad: &mut [f32]) {
                if self.opt.m.len() <= self.idx {
                    self.opt.m.push(vec![0.0; param.len()]);
                    self.opt.v.push(vec![0.0; param.len()]);
                }
                let m = &mut self.opt.m[self.idx];
                let v = &mut self.opt.v[self.idx];
                assert_eq!(m.len(), param.len(), "optimizer state shape drift");
                let (b1, b2, eps) = (self.opt.beta1, self.opt.beta2, self.opt.eps);
                for i in 0..param.len() {
                    let g = grad[i];
                    m[i] = b1 * m[i] + (1.0 - b1) * g;
                    v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                    let mhat = m[i] / self.bias1;
                    let vhat = v[i] / self.bias2;
                    param[i] -= self.lr * mhat / (vhat.sqrt() + eps);
                }
                self.idx += 1;
            }
        }
        let mut visitor = V { opt: self, idx: 0, lr, bias1, bias2 };
        model.visit_params(&mut visitor);
    }
}

impl Default for Adam {
    fn default() -> Self {
        Self::new()
    }
}

fn validate_model(model: &Model<f32>, val: &[ValCase]) -> Result<(f64, f64)> {
    if val.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let mut nmse_acc = 0.0;
    let mut ssim_acc = 0.0;
    for case in val {
        let pred = model_predict(model, &case.k_under, &case.coils)?;
        nmse_acc += nmse(&pred, &case.gt, &case.mask)?;
        ssim_acc += ssim(&pred, &case.gt, &case.mask)?;
    }
    Ok((nmse_acc / val.len() as f64, ssim_acc / val.len() as f64))
}

/// Train a model: per-epoch exponential learning-rate decay, validation
/// NMSE each epoch, returns the parameter snapshot with the best validation
/// NMSE (never the last epoch by default) plus the full log.
pub fn train(
    variant: &ModelVariant,
    samples: &[TrainSample],
    val: &[ValCase],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    variant.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("no training samples".into()));
    }
    let n_coils = samples[0].input.n_coils;
    let mut model = Model::<f32>::new(variant, n_coils, cfg.seed)?;
    let mut adam = Adam::new();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Checkpoint)> = None;
    let train_ids: Vec<u32> = {
        let mut ids: Vec<u32> = samples.iter().map(|s| s.subject_id).collect();
        ids.dedup();
        ids
    };
    let val_ids: Vec<u32> = val.iter().map(|c| c.subject_id).collect();
    let fp = cfg.fingerprint(variant);

    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = lr_at(cfg, epoch);
        let mut rng = stream_rng(cfg.seed, &[STREAM_ORDER, epoch as u64]);
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }

        let mut epoch_loss = 0.0f64;
        for batch in order.chunks(cfg.batch_size) {
            model.zero_grad();
            let scale = 1.0f32 / batch.len() as f32;
            for &idx in batch {
                let s = &samples[idx];
                let (y, cache) = model.forward(&s.input)?;
                let (loss, mut grad) = l1_loss_and_grad(&y, &s.target)?;
                epoch_loss += loss as f64 / order.len() as f64;
                grad.mapv_inplace(|g| Complex::new(g.re * scale, g.im * scale));
                model.backward(&s.input, &cache, &grad)?;
            }
            adam.step(&mut model, lr as f32);
        }
        if !epoch_loss.is_finite() {
            return Err(Error::Numeric(format!(
                "training diverged at epoch {epoch} (loss {epoch_loss})"
            )));
        }

        let (val_nmse, val_ssim) = validate_model(&model, val)?;
        log.push(TrainLogRow { epoch, train_l1: epoch_loss, val_nmse, val_ssim, lr });

        let better = match &best {
            None => true,
            Some((_, best_nmse, _)) => {
                val_nmse.is_finite() && (!best_nmse.is_finite() || val_nmse < *best_nmse)
            }
        };
        if better {
            let ckpt = Checkpoint::from_model(
                &mut model,
                fp,
                train_ids.clone(),
                val_ids.clone(),
                cfg.seed,
            );
            best = Some((epoch, val_nmse, ckpt));
        }
    }

    let (best_epoch, best_val_nmse, checkpoint) = best.expect("at least one epoch ran");
    Ok(TrainOutcome { checkpoint, log, best_epoch, best_val_nmse })
}

/// Uniformly random top-left corners of `n` spatial patches (full time
/// extent), deterministic by seed.
pub fn sample_patches(
    ny: usize,
    nx: usize,
    patch_size: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<(usize, usize)>> {
    if patch_size == 0 || patch_size > ny || patch_size > nx {
        return Err(Error::Config(format!(
            "patch size {patch_size} does not fit a {ny}x{nx} grid"
        )));
    }
    let mut rng = stream_rng(seed, &[STREAM_PATCH]);
    Ok((0..n)
        .map(|_| {
            (rng.random_range(0..=ny - patch_size), rng.random_range(0..=nx - patch_size))
        })
        .collect())
}

/// Crop one training sample to a spatial window (full time extent). The
/// patch carries its own cropped mask and k rows for provenance, but data
/// consistency is disabled inside patches: a window's k-space does not line
/// up with the acquisition lattice.
pub fn crop_sample(
    sample: &TrainSample,
    y0: usize,
    x0: usize,
    p: usize,
) -> Result<TrainSample> {
    let (t, ny, nx) = sample.input.dims;
    if y0 + p > ny || x0 + p > nx {
        return Err(Error::Shape("patch outside volume".into()));
    }
    let nc = sample.input.n_coils;
    let gather_fm = |fm: &FeatureMap<f32>| -> FeatureMap<f32> {
        let mut out = FeatureMap::zeros(fm.channels(), &[t, p, p]);
        for c in 0..fm.channels() {
            let src = fm.data.row(c);
            let mut dst = out.data.row_mut(c);
            for ti in 0..t {
                for y in 0..p {
                    for x in 0..p {
                        dst[(ti * p + y) * p + x] = src[(ti * ny + y0 + y) * nx + x0 + x];
                    }
                }
            }
        }
        out
    };
    let channels = gather_fm(&sample.input.channels);
    let k_acq = Array4::from_shape_fn((nc, t, p, p), |(c, ti, ky, kx)| {
        sample.input.k_acq[[c, ti, y0 + ky, x0 + kx]]
    });
    let mask = Array2::from_shape_fn((t, p), |(ti, ky)| sample.input.mask[[ti, y0 + ky]]);
    let tavg = sample.input.tavg.as_ref().map(|ta| {
        ndarray::Array3::from_shape_fn((nc, p, p), |(c, y, x)| ta[[c, y0 + y, x0 + x]])
    });
    let target = Array4::from_shape_fn((nc, t, p, p), |(c, ti, y, x)| {
        sample.target[[c, ti, y0 + y, x0 + x]]
    });
    Ok(TrainSample {
        subject_id: sample.subject_id,
        input: ModelInput {
            channels,
            k_acq,
            mask,
            tavg,
            dc_enabled: false,
            dims: (t, p, p),
            n_coils: nc,
        },
        target,
    })
}

/// Expand volume samples into patch samples (iterative-network training).
pub fn expand_patches(
    samples: &[TrainSample],
    patch_size: usize,
    per_volume: usize,
    seed: u64,
) -> Result<Vec<TrainSample>> {
    let mut out = Vec::with_capacity(samples.len() * per_volume);
    for s in samples {
        let (_, ny, nx) = s.input.dims;
        let corners =
            sample_patches(ny, nx, patch_size, per_volume, seed ^ (s.subject_id as u64) << 8)?;
        for (y0, x0) in corners {
            out.push(crop_sample(s, y0, x0, patch_size)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_arithmetic_matches_ceil_policy() {
        let ids: Vec<u32> = (0..56).collect();
        let s = split_dataset(&ids, &SplitSpec::default(), 7).unwrap();
        assert_eq!(s.test.len(), 12); // ceil(0.2 * 56)
        assert_eq!(s.val.len(), 9); // ceil(0.2 * 44)
        assert_eq!(s.train.len(), 35);
        s.assert_disjoint().unwrap();

        let ids: Vec<u32> = (0..5).collect();
        let s = split_dataset(&ids, &SplitSpec::default(), 7).unwrap();
        assert_eq!((s.test.len(), s.val.len(), s.train.len()), (1, 1, 3));

        assert!(split_dataset(&[1, 2, 3, 4], &SplitSpec::default(), 7).is_err());
    }

    #[test]
    fn split_is_deterministic() {
        let ids: Vec<u32> = (0..46).collect();
        let a = split_dataset(&ids, &SplitSpec::default(), 3).unwrap();
        let b = split_dataset(&ids, &SplitSpec::default(), 3).unwrap();
        assert_eq!(a, b);
        let c = split_dataset(&ids, &SplitSpec::default(), 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn l1_loss_cases() {
        use crate::arrays::{Domain, GridMeta, C32};
        use ndarray::Array3;
        let mut a = Array3::<C32>::zeros((1, 2, 2));
        let b = Array3::<C32>::zeros((1, 2, 2));
        a[[0, 0, 0]] = C32::new(3.0, 4.0);
        let pa = DynamicImage::new(a, Domain::Xt, GridMeta::default()).unwrap();
        let pb = DynamicImage::new(b, Domain::Xt, GridMeta::default()).unwrap();
        assert!((l1_loss(&pa, &pb).unwrap() - 7.0 / 4.0).abs() < 1e-12);
        assert_eq!(l1_loss(&pa, &pb).unwrap(), l1_loss(&pb, &pa).unwrap());
        assert_eq!(l1_loss(&pa, &pa).unwrap(), 0.0);
    }

    #[test]
    fn lr_schedule_is_exact() {
        let cfg = TrainConfig::default();
        for epoch in 0..50 {
            let want = 1e-4 * 0.95f64.powi(epoch as i32);
            assert_eq!(lr_at(&cfg, epoch), want);
        }
        let flat = TrainConfig { lr_decay: 1.0, ..Default::default() };
        assert_eq!(lr_at(&flat, 0), lr_at(&flat, 49));
    }

    #[test]
    fn patch_sampling_bounds_and_edges() {
        // full-size patch is the whole volume
        let full = sample_patches(32, 32, 32, 3, 1).unwrap();
        assert!(full.iter().all(|&(y, x)| y == 0 && x == 0));
        // n = 0 -> empty
        assert!(sample_patches(32, 32, 8, 0, 1).unwrap().is_empty());
        // oversize patch -> error
        assert!(sample_patches(16, 16, 17, 1, 1).is_err());
        // bounds hold for many draws
        for (y0, x0) in sample_patches(64, 48, 12, 10_000, 9).unwrap() {
            assert!(y0 + 12 <= 64 && x0 + 12 <= 48);
        }
    }

    #[test]
    fn bad_train_configs_are_rejected() {
        let mut cfg = TrainConfig::default();
        cfg.lr = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.lr_decay = 1.5;
        assert!(cfg.validate().is_err());
    }
}
