//! Runtime-selectable reconstruction strategies.
//!
//! Every reconstruction method, classical or learned, implements
//! [`Reconstructor`] and is resolved by name: the four baselines are
//! registered under fixed names, and any checkpoint file acts as a method
//! whose name is its variant. Inputs carry measurements only (undersampled
//! samples, mask, coil maps, optionally the dense low-resolution companion
//! for the prior-led solver); ground truth is not part of the interface.

use std::collections::BTreeMap;
use std::path::Path;

use crate::acquisition::KTData;
use crate::arrays::DynamicImage;
use crate::baselines::{
    broadcast_frames, sliding_window, temporal_average, xf_prior_recon, zero_fill_recon,
    XFPriorConfig,
};
use crate::error::{Error, Result};
use crate::models::checkpoint::load_checkpoint;
use crate::models::graph::Model;
use crate::models::predict::model_predict;
use crate::phantom::CoilModel;
use crate::sense::sense_combine;

/// Measurement bundle a reconstruction strategy may consume.
pub struct ReconContext<'a> {
    pub k_under: &'a KTData,
    pub coils: &'a CoilModel,
    /// densely sampled low-resolution companion (the prior-led solver's
    /// second acquisition); absent in prospective single-stage use
    pub dense_lowres: Option<&'a KTData>,
}

pub trait Reconstructor: Send + Sync {
    fn name(&self) -> &str;

    /// Coil-combined xt reconstruction.
    fn reconstruct(&self, input: &ReconContext) -> Result<DynamicImage>;

    /// Subjects a learned method was trained on (split-leakage guard).
    fn train_subjects(&self) -> Option<&[u32]> {
        None
    }

    fn checkpoint_fingerprint(&self) -> Option<u64> {
        None
    }
}

pub struct ZeroFill;

impl Reconstructor for ZeroFill {
    fn name(&self) -> &str {
        "zero_fill"
    }

    fn reconstruct(&self, input: &ReconContext) -> Result<DynamicImage> {
        sense_combine(&zero_fill_recon(input.k_under)?, input.coils, None)
    }
}

pub struct TemporalAverage;

impl Reconstructor for TemporalAverage {
    fn name(&self) -> &str {
        "temporal_average"
    }

    fn reconstruct(&self, input: &ReconContext) -> Result<DynamicImage> {
        let single = temporal_average(input.k_under)?;
        let volume = broadcast_frames(&single, input.k_under.n_frames())?;
        sense_combine(&volume, input.coils, None)
    }
}

pub struct SlidingWindow;

impl Reconstructor for SlidingWindow {
    fn name(&self) -> &str {
        "sliding_window"
    }

    fn reconstruct(&self, input: &ReconContext) -> Result<DynamicImage> {
        sense_combine(&sliding_window(input.k_under)?, input.coils, None)
    }
}

pub struct XfPrior {
    pub cfg: XFPriorConfig,
}

impl Reconstructor for XfPrior {
    fn name(&self) -> &str {
        "xf_prior"
    }

    fn reconstruct(&self, input: &ReconContext) -> Result<DynamicImage> {
        let dense = input.dense_lowres.ok_or_else(|| {
            Error::Config("xf_prior needs the dense low-resolution companion data".into())
        })?;
        xf_prior_recon(input.k_under, dense, input.coils, &self.cfg)
    }
}

/// A trained model behind the same interface.
pub struct ModelRecon {
    name: String,
    model: Model<f32>,
    train_subjects: Vec<u32>,
    fingerprint: u64,
}

impl ModelRecon {
    pub fn from_checkpoint_file(path: &Path) -> Result<Self> {
        let ckpt = load_checkpoint(path)?;
        let model = ckpt.into_model()?;
        Ok(ModelRecon {
            name: ckpt.variant.name.clone(),
            model,
            train_subjects: ckpt.train_subjects.clone(),
            fingerprint: ckpt.train_fingerprint,
        })
    }

    pub fn from_parts(model: Model<f32>, train_subjects: Vec<u32>, fingerprint: u64) -> Self {
        ModelRecon {
            name: model.variant().name.clone(),
            model,
            train_subjects,
            fingerprint,
        }
    }

    pub fn variant(&self) -> &crate::models::ModelVariant {
        self.model.variant()
    }
}

impl Reconstructor for ModelRecon {
    fn name(&self) -> &str {
        &self.name
    }

    fn reconstruct(&self, input: &ReconContext) -> Result<DynamicImage> {
        model_predict(&self.model, input.k_under, input.coils)
    }

    fn train_subjects(&self) -> Option<&[u32]> {
        Some(&self.train_subjects)
    }

    fn checkpoint_fingerprint(&self) -> Option<u64> {
        Some(self.fingerprint)
    }
}

type BaselineCtor = fn() -> Box<dyn Reconstructor>;

/// Name-indexed registry of the classical baselines.
pub fn baseline_registry() -> BTreeMap<&'static str, BaselineCtor> {
    let mut map: BTreeMap<&'static str, BaselineCtor> = BTreeMap::new();
    map.insert("zero_fill", || Box::new(ZeroFill));
    map.insert("temporal_average", || Box::new(TemporalAverage));
    map.insert("sliding_window", || Box::new(SlidingWindow));
    map.insert("xf_prior", || Box::new(XfPrior { cfg: XFPriorConfig::default() }));
    map
}

pub fn baseline_names() -> Vec<&'static str> {
    baseline_registry().keys().cloned().collect()
}

/// Resolve a method spec: a registered baseline name, or a path to a
/// checkpoint file.
pub fn resolve_method(spec: &str) -> Result<Box<dyn Reconstructor>> {
    if let Some(ctor) = baseline_registry().get(spec) {
        return Ok(ctor());
    }
    let path = Path::new(spec);
    if path.exists() {
        return Ok(Box::new(ModelRecon::from_checkpoint_file(path)?));
    }
    Err(Error::Config(format!(
        "unknown method '{spec}'; expected one of [{}] or a checkpoint path",
        baseline_names().join(", ")
    )))
}
