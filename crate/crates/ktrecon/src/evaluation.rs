//! Metric suite over a masked body region, per-volume scoring, aggregate
//! tables and figure rendering.
//!
//! NMSE/MSE/MAE compare complex volumes; PSNR and SSIM compare magnitudes
//! per frame (averaged over frames) with the data range taken from the
//! masked ground-truth magnitude of the whole volume. The body mask is the
//! thresholded temporal-mean magnitude of the ground truth, morphologically
//! closed with a 3x3 structuring element.

use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::arrays::{center_index, xt_to_xf, DynamicImage};
use crate::error::{Error, Result};

pub const DEFAULT_BODY_TAU: f32 = 0.05;
/// PSNR sentinel for identical volumes (reported in tables instead of inf).
pub const PSNR_CAP_DB: f64 = 99.0;

#[derive(Debug, Clone)]
pub struct BodyMask {
    pub mask: Array2<bool>,
    pub tau: f32,
}

impl BodyMask {
    pub fn area(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Entire field of view.
    pub fn full(ny: usize, nx: usize) -> Self {
        BodyMask { mask: Array2::from_elem((ny, nx), true), tau: 0.0 }
    }
}

/// Threshold the temporal-mean magnitude of the ground truth at
/// `tau * max`, then close with a 3x3 structuring element.
pub fn body_mask(gt: &DynamicImage, tau: f32) -> Result<BodyMask> {
    let (t_frames, ny, nx) = gt.data.dim();
    let mut mean = Array2::<f32>::zeros((ny, nx));
    for t in 0..t_frames {
        for y in 0..ny {
            for x in 0..nx {
                mean[[y, x]] += gt.data[[t, y, x]].norm() / t_frames as f32;
            }
        }
    }
    let max = mean.iter().cloned().fold(0.0f32, f32::max);
    if max <= 0.0 {
        return Err(Error::Numeric("body mask of an all-zero volume".into()));
    }
    // >= so that tau = 0 selects the full field of view
    let thresholded = mean.mapv(|v| v >= tau * max);
    let mask = if tau > 0.0 { close3x3(&thresholded) } else { thresholded };
    if !mask.iter().any(|&m| m) {
        return Err(Error::Numeric("body mask is empty".into()));
    }
    Ok(BodyMask { mask, tau })
}

fn dilate3x3(m: &Array2<bool>) -> Array2<bool> {
    let (ny, nx) = m.dim();
    Array2::from_shape_fn((ny, nx), |(y, x)| {
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                let yy = y as isize + dy;
                let xx = x as isize + dx;
                if yy >= 0 && yy < ny as isize && xx >= 0 && xx < nx as isize && m[[yy as usize, xx as usize]]
                {
                    return true;
                }
            }
        }
        false
    })
}

fn erode3x3(m: &Array2<bool>) -> Array2<bool> {
    let (ny, nx) = m.dim();
    Array2::from_shape_fn((ny, nx), |(y, x)| {
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                let yy = y as isize + dy;
                let xx = x as isize + dx;
                if yy < 0 || yy >= ny as isize || xx < 0 || xx >= nx as isize {
                    continue; // outside counts as "don't care" at the border
                }
                if !m[[yy as usize, xx as usize]] {
                    return false;
                }
            }
        }
        true
    })
}

fn close3x3(m: &Array2<bool>) -> Array2<bool> {
    erode3x3(&dilate3x3(m))
}

fn check_shapes(pred: &DynamicImage, gt: &DynamicImage, mask: &BodyMask) -> Result<()> {
    if pred.data.dim() != gt.data.dim() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.data.dim(),
            gt.data.dim()
        )));
    }
    let (_, ny, nx) = gt.data.dim();
    if mask.mask.dim() != (ny, nx) {
        return Err(Error::Shape("mask does not match volume".into()));
    }
    if !mask.mask.iter().any(|&m| m) {
        return Err(Error::Numeric("empty mask".into()));
    }
    Ok(())
}

/// `sum |pred - gt|^2 / sum |gt|^2` over masked voxels, all frames.
pub fn nmse(pred: &DynamicImage, gt: &DynamicImage, mask: &BodyMask) -> Result<f64> {
    check_shapes(pred, gt, mask)?;
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for ((t, y, x), v) in pred.data.indexed_iter() {
        let _ = t;
        if mask.mask[[y, x]] {
            let g = gt.data[[t, y, x]];
            num += (v - g).norm_sqr() as f64;
            den += g.norm_sqr() as f64;
        }
    }
    Ok(num / den.max(1e-300))
}

/// Mean `|pred - gt|^2` over masked voxels, all frames.
pub fn mse(pred: &DynamicImage, gt: &DynamicImage, mask: &BodyMask) -> Result<f64> {
    check_shapes(pred, gt, mask)?;
    let mut acc = 0.0f64;
    let mut n = 0usize;
    for ((t, y, x), v) in pred.data.indexed_iter() {
        if mask.mask[[y, x]] {
            acc += (v - gt.data[[t, y, x]]).norm_sqr() as f64;
            n += 1;
        }
    }
    Ok(acc / n as f64)
}

/// Mean `|pred - gt|` over masked voxels, all frames.
pub fn mae(pred: &DynamicImage, gt: &DynamicImage, mask: &BodyMask) -> Result<f64> {
    check_shapes(pred, gt, mask)?;
    let mut acc = 0.0f64;
    let mut n = 0usize;
    for ((t, y, x), v) in pred.data.indexed_iter() {
        if mask.mask[[y, x]] {
            acc += ((v - gt.data[[t, y, x]]).norm()) as f64;
            n += 1;
        }
    }
    Ok(acc / n as f64)
}

fn masked_data_range(gt: &DynamicImage, mask: &BodyMask) -> f64 {
    let mut max = 0.0f64;
    for ((_, y, x), v) in gt.data.indexed_iter() {
        if mask.mask[[y, x]] {
            max = max.max(v.norm() as f64);
        }
    }
    max
}

/// Peak signal-to-noise ratio on magnitudes, per frame then averaged; the
/// data range is the masked ground-truth maximum over the volume. Exact
/// matches hit the 99 dB sentinel.
pub fn psnr(pred: &DynamicImage, gt: &DynamicImage, mask: &BodyMask) -> Result<f64> {
    check_shapes(pred, gt, mask)?;
    let range = masked_data_range(gt, mask);
    if range <= 0.0 {
        return Err(Error::Numeric("zero data range".into()));
    }
    let (t_frames, ny, nx) = gt.data.dim();
    let mut total = 0.0f64;
    for t in 0..t_frames {
        let mut acc = 0.0f64;
        let mut n = 0usize;
        for y in 0..ny {
            for x in 0..nx {
                if mask.mask[[y, x]] {
                    let d = pred.data[[t, y, x]].norm() as f64 - gt.data[[t, y, x]].norm() as f64;
                    acc += d * d;
                    n += 1;
                }
            }
        }
        let frame_mse = acc / n as f64;
        let db = if frame_mse <= 0.0 {
            PSNR_CAP_DB
        } else {
            (10.0 * (range * range / frame_mse).log10()).min(PSNR_CAP_DB)
        };
        total += db;
    }
    Ok(total / t_frames as f64)
}

const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_kernel() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as isize;
    let mut k: Vec<f64> = (-half..=half)
        .map(|i| (-(i * i) as f64 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

/// Separable gaussian filter with symmetric boundary handling.
fn gaussian_filter(img: &Array2<f64>) -> Array2<f64> {
    let k = gaussian_kernel();
    let half = (SSIM_WINDOW / 2) as isize;
    let (ny, nx) = img.dim();
    let reflect = |i: isize, n: isize| -> usize {
        // symmetric padding with edge duplication
        let mut i = i;
        loop {
            if i < 0 {
                i = -i - 1;
            } else if i >= n {
                i = 2 * n - 1 - i;
            } else {
                return i as usize;
            }
        }
    };
    let mut tmp = Array2::<f64>::zeros((ny, nx));
    for y in 0..ny {
        for x in 0..nx {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let xx = reflect(x as isize + j as isize - half, nx as isize);
                acc += kv * img[[y, xx]];
            }
            tmp[[y, x]] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((ny, nx));
    for y in 0..ny {
        for x in 0..nx {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let yy = reflect(y as isize + j as isize - half, ny as isize);
                acc += kv * tmp[[yy, x]];
            }
            out[[y, x]] = acc;
        }
    }
    out
}

fn mask_bbox(mask: &Array2<bool>) -> (usize, usize, usize, usize) {
    let (ny, nx) = mask.dim();
    let (mut y0, mut y1, mut x0, mut x1) = (ny, 0usize, nx, 0usize);
    for ((y, x), &m) in mask.indexed_iter() {
        if m {
            y0 = y0.min(y);
            y1 = y1.max(y);
            x0 = x0.min(x);
            x1 = x1.max(x);
        }
    }
    (y0, y1 + 1, x0, x1 + 1)
}

/// Structural similarity on magnitudes over the mask bounding box, per
/// frame then averaged. Standard constants K1 = 0.01, K2 = 0.03, gaussian
/// window 11 with sigma 1.5.
pub fn ssim(pred: &DynamicImage, gt: &DynamicImage, mask: &BodyMask) -> Result<f64> {
    check_shapes(pred, gt, mask)?;
    let range = masked_data_range(gt, mask);
    if range <= 0.0 {
        return Err(Error::Numeric("zero data range".into()));
    }
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let (y0, y1, x0, x1) = mask_bbox(&mask.mask);
    let (t_frames, _, _) = gt.data.dim();
    let mut total = 0.0f64;
    for t in 0..t_frames {
        let a = Array2::from_shape_fn((y1 - y0, x1 - x0), |(y, x)| {
            pred.data[[t, y + y0, x + x0]].norm() as f64
        });
        let b = Array2::from_shape_fn((y1 - y0, x1 - x0), |(y, x)| {
            gt.data[[t, y + y0, x + x0]].norm() as f64
        });
        let mu_a = gaussian_filter(&a);
        let mu_b = gaussian_filter(&b);
        let aa = gaussian_filter(&(&a * &a));
        let bb = gaussian_filter(&(&b * &b));
        let ab = gaussian_filter(&(&a * &b));
        let mut acc = 0.0f64;
        let mut n = 0usize;
        for y in 0..y1 - y0 {
            for x in 0..x1 - x0 {
                let ma = mu_a[[y, x]];
                let mb = mu_b[[y, x]];
                let va = aa[[y, x]] - ma * ma;
                let vb = bb[[y, x]] - mb * mb;
                let cov = ab[[y, x]] - ma * mb;
                let s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                acc += s;
                n += 1;
            }
        }
        total += acc / n as f64;
    }
    Ok(total / t_frames as f64)
}

/// One scored volume.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MetricRow {
    pub subject: String,
    pub nmse: f64,
    pub mse: f64,
    pub mae: f64,
    pub psnr: f64,
    pub ssim: f64,
    /// extra diagnostic: NMSE restricted to the heart region (not part of
    /// the reference table layout)
    pub nmse_heart: Option<f64>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub label: String,
    pub seed: u64,
    pub split: String,
    pub checkpoint_fingerprint: Option<String>,
    pub body_tau: f32,
    pub rows: Vec<MetricRow>,
    pub mean_nmse: f64,
    pub mean_mse: f64,
    pub mean_mae: f64,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

impl MetricsReport {
    pub fn from_rows(
        method: &str,
        label: &str,
        seed: u64,
        split: &str,
        checkpoint_fingerprint: Option<String>,
        body_tau: f32,
        rows: Vec<MetricRow>,
    ) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Data("metrics report without rows".into()));
        }
        let n = rows.len() as f64;
        let mean = |f: &dyn Fn(&MetricRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
        Ok(MetricsReport {
            method: method.to_string(),
            label: label.to_string(),
            seed,
            split: split.to_string(),
            checkpoint_fingerprint,
            body_tau,
            mean_nmse: mean(&|r| r.nmse),
            mean_mse: mean(&|r| r.mse),
            mean_mae: mean(&|r| r.mae),
            mean_psnr: mean(&|r| r.psnr),
            mean_ssim: mean(&|r| r.ssim),
            rows,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("subject,nmse,mse,mae,psnr,ssim,nmse_heart\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.6e},{:.6e},{:.6e},{:.4},{:.6},{}\n",
                r.subject,
                r.nmse,
                r.mse,
                r.mae,
                r.psnr,
                r.ssim,
                r.nmse_heart.map(|v| format!("{v:.6e}")).unwrap_or_default()
            ));
        }
        out.push_str(&format!(
            "mean,{:.6e},{:.6e},{:.6e},{:.4},{:.6},\n",
            self.mean_nmse, self.mean_mse, self.mean_mae, self.mean_psnr, self.mean_ssim
        ));
        out
    }
}

/// Render several reports as an aligned text table sorted by NMSE.
pub fn render_table(reports: &[MetricsReport]) -> String {
    let mut sorted: Vec<&MetricsReport> = reports.iter().collect();
    sorted.sort_by(|a, b| a.mean_nmse.total_cmp(&b.mean_nmse));
    let mut out = String::new();
    out.push_str(&format!(
        "{:<44} {:>10} {:>12} {:>10} {:>8} {:>8}\n",
        "Model description", "NMSE", "MSE", "MAE", "PSNR", "SSIM"
    ));
    for r in sorted {
        out.push_str(&format!(
            "{:<44} {:>10.4} {:>12.6} {:>10.4} {:>8.2} {:>8.4}\n",
            r.label, r.mean_nmse, r.mean_mse, r.mean_mae, r.mean_psnr, r.mean_ssim
        ));
    }
    out
}

/// One test volume, packaged for scoring: measurements for the method under
/// test plus the ground truth for metrics.
pub struct EvalCase {
    pub subject_id: u32,
    pub subject_name: String,
    pub k_under: crate::acquisition::KTData,
    pub coils: crate::phantom::CoilModel,
    pub dense_lowres: Option<crate::acquisition::KTData>,
    pub gt: DynamicImage,
    pub heart_roi: Option<Array2<bool>>,
    pub heart_line: usize,
}

/// Score one reconstruction method over a set of test volumes. Learned
/// methods are refused if any test subject appears in their training set.
pub fn evaluate_variant(
    rec: &dyn crate::registry::Reconstructor,
    cases: &[EvalCase],
    tau: f32,
    split_label: &str,
    seed: u64,
) -> Result<MetricsReport> {
    if cases.is_empty() {
        return Err(Error::Data("no evaluation cases".into()));
    }
    if let Some(train_ids) = rec.train_subjects() {
        for case in cases {
            if train_ids.contains(&case.subject_id) {
                return Err(Error::Data(format!(
                    "split leakage: subject {} is in the training set of '{}'",
                    case.subject_id,
                    rec.name()
                )));
            }
        }
    }
    let mut rows = Vec::with_capacity(cases.len());
    for case in cases {
        let ctx = crate::registry::ReconContext {
            k_under: &case.k_under,
            coils: &case.coils,
            dense_lowres: case.dense_lowres.as_ref(),
        };
        let pred = rec.reconstruct(&ctx)?;
        let mask = body_mask(&case.gt, tau)?;
        let nmse_heart = match &case.heart_roi {
            Some(roi) => {
                let roi_mask = BodyMask { mask: roi.clone(), tau: 0.0 };
                Some(nmse(&pred, &case.gt, &roi_mask)?)
            }
            None => None,
        };
        rows.push(MetricRow {
            subject: case.subject_name.clone(),
            nmse: nmse(&pred, &case.gt, &mask)?,
            mse: mse(&pred, &case.gt, &mask)?,
            mae: mae(&pred, &case.gt, &mask)?,
            psnr: psnr(&pred, &case.gt, &mask)?,
            ssim: ssim(&pred, &case.gt, &mask)?,
            nmse_heart,
        });
    }
    rows.sort_by(|a, b| a.subject.cmp(&b.subject));
    MetricsReport::from_rows(
        rec.name(),
        rec.name(),
        seed,
        split_label,
        rec.checkpoint_fingerprint().map(|f| format!("{f:016x}")),
        tau,
        rows,
    )
}

/// Package a dataset subject as an evaluation case (multi-coil flavor when
/// `multi` is set, otherwise the coil-combined flavor).
pub fn eval_case_from(sd: &crate::dataset::SubjectData, multi: bool) -> Result<EvalCase> {
    let dense = if multi {
        sd.gt.kt_dense.clone()
    } else {
        // combined flavor: the dense companion is the combined volume's
        // k-space under the dense band mask
        let k = crate::arrays::xt_to_kt(&sd.gt.combined)?;
        crate::acquisition::KTData::from_single(&k, sd.gt.kt_dense.mask.clone(), true)?
    };
    Ok(EvalCase {
        subject_id: sd.subject.subject_id,
        subject_name: sd.subject.name(),
        k_under: if multi { sd.kt_under_mc.clone() } else { sd.cc_k_under.clone() },
        coils: if multi { sd.gt.coils.clone() } else { sd.cc_coils.clone() },
        dense_lowres: Some(dense),
        gt: sd.gt.combined.clone(),
        heart_roi: Some(sd.subject.heart_roi(2.0)),
        heart_line: sd.subject.heart_line(),
    })
}

/// Data behind one figure set; also written as PNG panels.
#[derive(Debug, Clone)]
pub struct FigurePanels {
    /// magnitude of one frame (pred)
    pub frame: Array2<f32>,
    /// y-t profile magnitude along the heart line
    pub yt: Array2<f32>,
    /// y-f profile magnitude along the heart line
    pub yf: Array2<f32>,
    pub frame_err: Array2<f32>,
    pub yt_err: Array2<f32>,
    pub yf_err: Array2<f32>,
    pub paths: Vec<PathBuf>,
}

/// Emit the six panels (frame, y-t, y-f magnitudes plus the matching
/// absolute-error maps) for a prediction against its ground truth, using
/// color scaling derived from the ground truth so panels are comparable.
pub fn render_figures(
    pred: &DynamicImage,
    gt: &DynamicImage,
    heart_line: usize,
    out_dir: &Path,
    prefix: &str,
) -> Result<FigurePanels> {
    if pred.data.dim() != gt.data.dim() {
        return Err(Error::Shape("prediction and ground truth differ in shape".into()));
    }
    let (t_frames, ny, nx) = gt.data.dim();
    if heart_line >= ny {
        return Err(Error::Config(format!("heart line {heart_line} out of bounds (ny={ny})")));
    }
    std::fs::create_dir_all(out_dir)?;

    let mid = t_frames / 2;
    let frame = Array2::from_shape_fn((ny, nx), |(y, x)| pred.data[[mid, y, x]].norm());
    let frame_gt = Array2::from_shape_fn((ny, nx), |(y, x)| gt.data[[mid, y, x]].norm());
    let frame_err = Array2::from_shape_fn((ny, nx), |(y, x)| {
        (pred.data[[mid, y, x]] - gt.data[[mid, y, x]]).norm()
    });

    // y-t profiles along the heart line: axes (y, t)
    let yt = Array2::from_shape_fn((ny, t_frames), |(y, t)| pred.data[[t, y, heart_line_x(nx)]].norm());
    let _ = yt; // replaced below; kept for clarity of orientation choice
    let yt = Array2::from_shape_fn((ny, t_frames), |(y, t)| pred.data[[t, y, 0]].norm());
    let _ = yt;
    // profile through the heart row: fix y = heart_line, vary (t, x) is the
    // x-t view; the reference layout slices along the row, producing (x, t)
    let yt = Array2::from_shape_fn((nx, t_frames), |(x, t)| pred.data[[t, heart_line, x]].norm());
    let yt_gt = Array2::from_shape_fn((nx, t_frames), |(x, t)| gt.data[[t, heart_line, x]].norm());
    let yt_err = Array2::from_shape_fn((nx, t_frames), |(x, t)| {
        (pred.data[[t, heart_line, x]] - gt.data[[t, heart_line, x]]).norm()
    });

    let pred_xf = xt_to_xf(pred)?;
    let gt_xf = xt_to_xf(gt)?;
    let yf = Array2::from_shape_fn((nx, t_frames), |(x, f)| pred_xf.data[[f, heart_line, x]].norm());
    let yf_gt = Array2::from_shape_fn((nx, t_frames), |(x, f)| gt_xf.data[[f, heart_line, x]].norm());
    let yf_err = Array2::from_shape_fn((nx, t_frames), |(x, f)| {
        (pred_xf.data[[f, heart_line, x]] - gt_xf.data[[f, heart_line, x]]).norm()
    });

    let max_of = |a: &Array2<f32>| a.iter().cloned().fold(0.0f32, f32::max).max(1e-12);
    let panels: Vec<(&str, &Array2<f32>, f32)> = vec![
        ("frame", &frame, max_of(&frame_gt)),
        ("yt", &yt, max_of(&yt_gt)),
        ("yf", &yf, max_of(&yf_gt)),
        ("frame_err", &frame_err, max_of(&frame_gt)),
        ("yt_err", &yt_err, max_of(&yt_gt)),
        ("yf_err", &yf_err, max_of(&yf_gt)),
    ];
    let mut paths = Vec::new();
    for (panel, data, vmax) in &panels {
        let path = out_dir.join(format!("{prefix}_{panel}.png"));
        write_png(data, *vmax, &path)?;
        paths.push(path);
    }

    Ok(FigurePanels { frame, yt, yf, frame_err, yt_err, yf_err, paths })
}

fn heart_line_x(nx: usize) -> usize {
    nx / 2
}

fn write_png(data: &Array2<f32>, vmax: f32, path: &Path) -> Result<()> {
    let (h, w) = data.dim();
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for ((y, x), v) in data.indexed_iter() {
        let level = ((v / vmax).clamp(0.0, 1.0) * 255.0).round() as u8;
        img.put_pixel(x as u32, y as u32, image::Luma([level]));
    }
    img.save(path).map_err(|e| Error::Data(format!("png write failed: {e}")))?;
    Ok(())
}

/// Fraction of y-f panel energy inside the f = 0 column.
pub fn yf_f0_energy_fraction(yf: &Array2<f32>, t_frames: usize) -> f64 {
    let f0 = center_index(t_frames);
    let mut f0_energy = 0.0f64;
    let mut total = 0.0f64;
    for ((_, f), v) in yf.indexed_iter() {
        let e = (*v as f64) * (*v as f64);
        total += e;
        if f == f0 {
            f0_energy += e;
        }
    }
    f0_energy / total.max(1e-300)
}
