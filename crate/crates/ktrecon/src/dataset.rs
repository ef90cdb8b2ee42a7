//! Experiment configuration, dataset assembly (undersampled inputs plus
//! low-resolution ground truth per subject, in both coil-combined and
//! multi-coil flavors) and the on-disk subject format: one directory per
//! subject with raw little-endian interleaved complex64 arrays and a JSON
//! manifest.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3, Array4, ArrayD, IxDyn};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::acquisition::{
    lattice_mask, make_lowres_ground_truth, retrospective_undersample, undersample_image, KTData,
    MaskSpec, SamplingMask,
};
use crate::arrays::{coil_xt_to_xf, CoilImages, Domain, DynamicImage, C32};
use crate::error::{Error, Result};
use crate::evaluation::body_mask;
use crate::models::{CoilMode, ModelVariant, ProcDomain};
use crate::phantom::{generate_subject, subject_from_parts, CoilModel, PhantomConfig, Subject};
use crate::training::{TrainConfig, TrainSample, ValCase};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Desk,
    PaperScale,
}

/// Top-level experiment settings; a single JSON document, echoed into every
/// output directory.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ExperimentConfig {
    pub profile: Profile,
    pub phantom: PhantomConfig,
    /// acceleration factor of the k-t lattice
    pub r: usize,
    pub shear: usize,
    /// central-line count of the dense low-resolution band; `None` derives
    /// the nearest odd integer to ny/8
    pub n_central: Option<usize>,
    pub n_subjects: usize,
    pub variants: Vec<String>,
    pub train: TrainConfig,
    pub body_tau: f32,
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn desk() -> Self {
        ExperimentConfig {
            profile: Profile::Desk,
            phantom: PhantomConfig::desk(),
            r: 8,
            shear: 1,
            n_central: None,
            n_subjects: 10,
            variants: vec!["3d_xf_skip_dcf".into()],
            train: TrainConfig::default(),
            body_tau: crate::evaluation::DEFAULT_BODY_TAU,
            seed: 0,
        }
    }

    pub fn paper_scale() -> Self {
        ExperimentConfig {
            profile: Profile::PaperScale,
            phantom: PhantomConfig::default(),
            r: 8,
            shear: 1,
            n_central: Some(19),
            n_subjects: 56,
            variants: crate::models::all_variants().iter().map(|v| v.name.clone()).collect(),
            train: TrainConfig::default(),
            body_tau: crate::evaluation::DEFAULT_BODY_TAU,
            seed: 0,
        }
    }

    pub fn effective_n_central(&self) -> usize {
        self.n_central.unwrap_or_else(|| derived_n_central(self.phantom.ny))
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        if self.n_subjects == 0 {
            return Err(Error::Config("need at least one subject".into()));
        }
        let nc = self.effective_n_central();
        if nc == 0 || nc > self.phantom.ny {
            return Err(Error::Config(format!("n_central {nc} out of range")));
        }
        self.train.validate()?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Nearest odd integer to ny/8 (ties round up), keeping the reference
/// low-pass fraction on grids where ny/8 is even.
pub fn derived_n_central(ny: usize) -> usize {
    let b = ny as f64 / 8.0;
    let k = ((b - 1.0) / 2.0).round() as usize;
    (2 * k + 1).clamp(1, ny)
}

/// One subject's measurement products, in both dataset flavors.
pub struct SubjectData {
    pub subject: Subject,
    /// dense low-resolution measurement set (prewhitened), per-coil images
    /// and the coil-combined ground truth
    pub gt: crate::acquisition::LowresGroundTruth,
    /// lattice-undersampled multi-coil input
    pub kt_under_mc: KTData,
    /// lattice-undersampled coil-combined input (one virtual coil)
    pub cc_k_under: KTData,
    pub cc_coils: CoilModel,
}

impl SubjectData {
    pub fn lattice(&self) -> &SamplingMask {
        &self.kt_under_mc.mask
    }
}

pub fn build_subject_data(cfg: &ExperimentConfig, subject_id: u32) -> Result<SubjectData> {
    let subject = generate_subject(&cfg.phantom, subject_id)?;
    let n_central = cfg.effective_n_central();
    let gt = make_lowres_ground_truth(
        &subject,
        n_central,
        cfg.phantom.noise_sigma,
        cfg.seed,
    )?;
    let lattice = lattice_mask(cfg.phantom.ny, cfg.phantom.n_frames, cfg.r, cfg.shear)?;
    let kt_under_mc = retrospective_undersample(&gt.kt_dense, &lattice)?;
    let cc_k_under = undersample_image(&gt.combined, &lattice)?;
    let cc_coils = CoilModel::uniform_single(cfg.phantom.ny, cfg.phantom.nx);
    Ok(SubjectData { subject, gt, kt_under_mc, cc_k_under, cc_coils })
}

/// Build several subjects in parallel (each subject is independent and
/// seeded, so the result does not depend on scheduling).
pub fn build_dataset(cfg: &ExperimentConfig, ids: &[u32]) -> Result<Vec<SubjectData>> {
    ids.par_iter().map(|&id| build_subject_data(cfg, id)).collect()
}

/// Target stack for a variant: the ground-truth volume(s) in the variant's
/// processing domain and coil flavor.
pub fn target_for(variant: &ModelVariant, sd: &SubjectData) -> Result<Array4<C32>> {
    let stack: CoilImages = match variant.coil_mode {
        CoilMode::Combined => CoilImages::from_single(&sd.gt.combined),
        CoilMode::Multi => sd.gt.coil_images.clone(),
    };
    Ok(match variant.domain {
        ProcDomain::Xt => stack.data,
        ProcDomain::Xf => coil_xt_to_xf(&stack)?.data,
    })
}

pub fn input_for<'a>(variant: &ModelVariant, sd: &'a SubjectData) -> &'a KTData {
    match variant.coil_mode {
        CoilMode::Combined => &sd.cc_k_under,
        CoilMode::Multi => &sd.kt_under_mc,
    }
}

pub fn coils_for<'a>(variant: &ModelVariant, sd: &'a SubjectData) -> &'a CoilModel {
    match variant.coil_mode {
        CoilMode::Combined => &sd.cc_coils,
        CoilMode::Multi => &sd.gt.coils,
    }
}

pub fn train_sample(variant: &ModelVariant, sd: &SubjectData) -> Result<TrainSample> {
    let input = crate::models::assemble_input(variant, input_for(variant, sd))?;
    let target = target_for(variant, sd)?.mapv(|z| num_complex::Complex::new(z.re, z.im));
    Ok(TrainSample { subject_id: sd.subject.subject_id, input, target })
}

pub fn val_case(variant: &ModelVariant, sd: &SubjectData, tau: f32) -> Result<ValCase> {
    Ok(ValCase {
        subject_id: sd.subject.subject_id,
        k_under: input_for(variant, sd).clone(),
        coils: coils_for(variant, sd).clone(),
        gt: sd.gt.combined.clone(),
        mask: body_mask(&sd.gt.combined, tau)?,
    })
}

// ---------------------------------------------------------------------------
// on-disk format

const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
struct ArrayEntry {
    name: String,
    file: String,
    axes: Vec<String>,
    shape: Vec<usize>,
    dtype: String,
    byte_order: String,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SubjectManifest {
    format_version: u32,
    pub subject_id: u32,
    pub name: String,
    pub seed: u64,
    pub config: PhantomConfig,
    pub dy_mm: f32,
    pub dx_mm: f32,
    pub dt_ms: f32,
    pub body_center: (f64, f64),
    pub body_semi: (f64, f64),
    pub heart_center: (f64, f64),
    pub heart_radius_px: f64,
    pub heart_line: usize,
    pub lattice: MaskSpec,
    pub dense: MaskSpec,
    arrays: Vec<ArrayEntry>,
}

fn write_c64(path: &Path, data: &[C32]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for v in data {
        f.write_all(&v.re.to_le_bytes())?;
        f.write_all(&v.im.to_le_bytes())?;
    }
    Ok(())
}

fn read_c64(path: &Path, expected_len: usize) -> Result<Vec<C32>> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)?;
    if bytes.len() != expected_len * 8 {
        return Err(Error::Data(format!(
            "{}: expected {} complex64 values, file holds {} bytes",
            path.display(),
            expected_len,
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| {
            C32::new(
                f32::from_le_bytes([c[0], c[1], c[2], c[3]]),
                f32::from_le_bytes([c[4], c[5], c[6], c[7]]),
            )
        })
        .collect())
}

/// Write one subject directory: manifest plus raw complex64 arrays
/// (truth, raw sensitivities, noise covariance, whitened sensitivities and
/// the dense-band measurements). Undersampled inputs are derived from the
/// stored mask specs on load, never stored.
pub fn export_subject(dir: &Path, sd: &SubjectData) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let s = &sd.subject;
    let (t, ny, nx) = s.truth.data.dim();
    let nc = s.coils.n_coils();

    let mut arrays = Vec::new();
    let mut emit = |name: &str, axes: &[&str], shape: Vec<usize>, data: Vec<C32>| -> Result<()> {
        let file = format!("{name}.c64");
        write_c64(&dir.join(&file), &data)?;
        arrays.push(ArrayEntry {
            name: name.to_string(),
            file,
            axes: axes.iter().map(|a| a.to_string()).collect(),
            shape,
            dtype: "complex64".into(),
            byte_order: "little".into(),
        });
        Ok(())
    };

    emit("truth", &["time", "ky", "kx"], vec![t, ny, nx], s.truth.data.iter().cloned().collect())?;
    emit(
        "sens",
        &["coil", "ky", "kx"],
        vec![nc, ny, nx],
        s.coils.sensitivities.iter().cloned().collect(),
    )?;
    emit(
        "noise_cov",
        &["coil", "coil"],
        vec![nc, nc],
        s.coils.noise_cov.iter().map(|z| C32::new(z.re as f32, z.im as f32)).collect(),
    )?;
    emit(
        "sens_white",
        &["coil", "ky", "kx"],
        vec![nc, ny, nx],
        sd.gt.coils.sensitivities.iter().cloned().collect(),
    )?;
    emit(
        "kt_dense",
        &["coil", "time", "ky", "kx"],
        vec![nc, t, ny, nx],
        sd.gt.kt_dense.samples.iter().cloned().collect(),
    )?;

    let manifest = SubjectManifest {
        format_version: FORMAT_VERSION,
        subject_id: s.subject_id,
        name: s.name(),
        seed: s.seed,
        config: s.config.clone(),
        dy_mm: s.truth.meta.dy_mm,
        dx_mm: s.truth.meta.dx_mm,
        dt_ms: s.truth.meta.dt_ms,
        body_center: s.body_center,
        body_semi: s.body_semi,
        heart_center: s.heart_center,
        heart_radius_px: s.heart_radius_px,
        heart_line: s.heart_line(),
        lattice: sd.kt_under_mc.mask.spec(),
        dense: sd.gt.kt_dense.mask.spec(),
        arrays,
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

fn to_dyn_array(values: Vec<C32>, shape: &[usize]) -> Result<ArrayD<C32>> {
    ArrayD::from_shape_vec(IxDyn(shape), values)
        .map_err(|e| Error::Data(format!("bad array shape: {e}")))
}

/// Load a subject directory written by [`export_subject`].
pub fn load_subject(dir: &Path) -> Result<SubjectData> {
    let manifest_path = dir.join("manifest.json");
    let manifest: SubjectManifest = serde_json::from_slice(
        &std::fs::read(&manifest_path)
            .map_err(|e| Error::Data(format!("{}: {e}", manifest_path.display())))?,
    )?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Data(format!(
            "unsupported subject format version {}",
            manifest.format_version
        )));
    }
    let mut arrays = std::collections::BTreeMap::new();
    for entry in &manifest.arrays {
        let len: usize = entry.shape.iter().product();
        let values = read_c64(&dir.join(&entry.file), len)?;
        arrays.insert(entry.name.clone(), to_dyn_array(values, &entry.shape)?);
    }
    let fetch = |name: &str| -> Result<ArrayD<C32>> {
        arrays
            .get(name)
            .cloned()
            .ok_or_else(|| Error::Data(format!("manifest lacks array '{name}'")))
    };

    let cfg = manifest.config.clone();
    let meta = cfg.meta();
    let truth = DynamicImage::new(
        fetch("truth")?.into_dimensionality().map_err(|e| Error::Data(e.to_string()))?,
        Domain::Xt,
        meta,
    )?;
    let sens: Array3<C32> =
        fetch("sens")?.into_dimensionality().map_err(|e| Error::Data(e.to_string()))?;
    let cov32: Array2<C32> =
        fetch("noise_cov")?.into_dimensionality().map_err(|e| Error::Data(e.to_string()))?;
    let noise_cov =
        cov32.mapv(|z| Complex64::new(z.re as f64, z.im as f64));
    let coils = CoilModel { sensitivities: sens, noise_cov };

    let sens_white: Array3<C32> =
        fetch("sens_white")?.into_dimensionality().map_err(|e| Error::Data(e.to_string()))?;
    let nc = sens_white.dim().0;
    let eye = Array2::from_shape_fn((nc, nc), |(i, j)| {
        Complex64::new(if i == j { 1.0 } else { 0.0 }, 0.0)
    });
    let coils_white = CoilModel { sensitivities: sens_white, noise_cov: eye };

    let kt_dense_samples: Array4<C32> =
        fetch("kt_dense")?.into_dimensionality().map_err(|e| Error::Data(e.to_string()))?;
    let (_, t, ny, _) = kt_dense_samples.dim();
    let dense = manifest.dense.build(ny, t)?;
    let kt_dense = KTData { samples: kt_dense_samples, mask: dense, prewhitened: true, meta };

    let stack = CoilImages::new(kt_dense.samples.clone(), Domain::Kt, meta)?;
    let coil_images = crate::arrays::coil_kt_to_xt(&stack)?;
    let combined = crate::sense::sense_combine(&coil_images, &coils_white, None)?;
    let gt = crate::acquisition::LowresGroundTruth {
        kt_dense,
        coil_images,
        combined: combined.clone(),
        coils: coils_white,
    };

    let lattice = manifest.lattice.build(ny, t)?;
    let kt_under_mc = retrospective_undersample(&gt.kt_dense, &lattice)?;
    let cc_k_under = undersample_image(&gt.combined, &lattice)?;
    let cc_coils = CoilModel::uniform_single(ny, truth.nx());

    let mut subject = subject_from_parts(manifest.subject_id, truth, coils, cfg);
    subject.seed = manifest.seed;
    subject.body_center = manifest.body_center;
    subject.body_semi = manifest.body_semi;
    subject.heart_center = manifest.heart_center;
    subject.heart_radius_px = manifest.heart_radius_px;

    Ok(SubjectData { subject, gt, kt_under_mc, cc_k_under, cc_coils })
}

/// Read the manifest only (cheap listing).
pub fn load_manifest(dir: &Path) -> Result<SubjectManifest> {
    let manifest: SubjectManifest =
        serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
    Ok(manifest)
}

/// Subject directories under a dataset root, ordered by subject id.
pub fn list_subject_dirs(root: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut dirs = Vec::new();
    for entry in std::fs::read_dir(root)
        .map_err(|e| Error::Data(format!("{}: {e}", root.display())))?
    {
        let path = entry?.path();
        if path.is_dir() && path.join("manifest.json").exists() {
            dirs.push(path);
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Data(format!("no subject directories under {}", root.display())));
    }
    Ok(dirs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_band_keeps_lowpass_fraction() {
        assert_eq!(derived_n_central(64), 9);
        assert_eq!(derived_n_central(152), 19);
        assert_eq!(derived_n_central(48), 7); // 6 -> nearest odd, ties up
        assert_eq!(derived_n_central(8), 1);
    }

    #[test]
    fn config_json_roundtrip_and_validation() {
        let cfg = ExperimentConfig::desk();
        let text = cfg.to_json();
        let back = ExperimentConfig::from_json(&text).unwrap();
        assert_eq!(back.r, 8);
        assert_eq!(back.effective_n_central(), 9);

        let mut bad = ExperimentConfig::desk();
        bad.n_subjects = 0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn subject_export_import_is_bit_exact() {
        let mut cfg = ExperimentConfig::desk();
        cfg.phantom.seed = 91;
        cfg.seed = 91;
        let sd = build_subject_data(&cfg, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let sub_dir = dir.path().join(sd.subject.name());
        export_subject(&sub_dir, &sd).unwrap();
        let loaded = load_subject(&sub_dir).unwrap();

        for (a, b) in sd.subject.truth.data.iter().zip(loaded.subject.truth.data.iter()) {
            assert_eq!(a, b);
        }
        for (a, b) in sd.gt.kt_dense.samples.iter().zip(loaded.gt.kt_dense.samples.iter()) {
            assert_eq!(a, b);
        }
        for (a, b) in sd.kt_under_mc.samples.iter().zip(loaded.kt_under_mc.samples.iter()) {
            assert_eq!(a, b);
        }
        // combined gt is recomputed from stored arrays with the same code
        // path, so it matches exactly as well
        for (a, b) in sd.gt.combined.data.iter().zip(loaded.gt.combined.data.iter()) {
            assert_eq!(a, b);
        }
        assert_eq!(loaded.subject.heart_line(), sd.subject.heart_line());

        // rerunning the export produces byte-identical files
        let dir2 = dir.path().join("again");
        export_subject(&dir2, &sd).unwrap();
        for name in ["truth.c64", "kt_dense.c64", "manifest.json"] {
            let a = std::fs::read(sub_dir.join(name)).unwrap();
            let b = std::fs::read(dir2.join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between exports");
        }
    }

    #[test]
    fn build_dataset_is_deterministic_under_parallelism() {
        let mut cfg = ExperimentConfig::desk();
        cfg.phantom.seed = 92;
        cfg.seed = 92;
        let ids: Vec<u32> = (0..4).collect();
        let a = build_dataset(&cfg, &ids).unwrap();
        let b = build_dataset(&cfg, &ids).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.subject.subject_id, y.subject.subject_id);
            for (u, v) in x.kt_under_mc.samples.iter().zip(y.kt_under_mc.samples.iter()) {
                assert_eq!(u, v);
            }
        }
    }

    #[test]
    fn train_sample_shapes_follow_variant() {
        let mut cfg = ExperimentConfig::desk();
        cfg.phantom.seed = 93;
        let sd = build_subject_data(&cfg, 0).unwrap();

        let combined = crate::models::variant_by_name("3d_xf_skip_dcf").unwrap();
        let ts = train_sample(&combined, &sd).unwrap();
        assert_eq!(ts.input.channels.channels(), 2);
        assert_eq!(ts.target.dim(), (1, 32, 64, 64));
        assert!(ts.input.tavg.is_some());

        let multi = crate::models::variant_by_name("mc_3d_xf_skip_dcf").unwrap();
        let ts = train_sample(&multi, &sd).unwrap();
        assert_eq!(ts.input.channels.channels(), 16);
        assert_eq!(ts.target.dim(), (8, 32, 64, 64));
    }
}
