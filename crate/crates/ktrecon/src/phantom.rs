//! Synthetic dynamic cardiac subjects.
//!
//! Each subject is a complex-valued space-time volume: a large maternal body
//! ellipse breathing slowly along y, a few static internal ellipses, and a
//! small fetal-heart disc whose radius and internal intensity oscillate at
//! the fetal heart rate. Geometry is jittered per subject; everything is
//! deterministic given `(seed, subject_id)`.
//!
//! Scenes are rasterized with 4x supersampling so that subpixel radius
//! changes register on coarse grids, and a smooth static phase field makes
//! the volumes genuinely complex-valued.

use ndarray::{Array2, Array3};
use num_complex::Complex64;
use rand::Rng;

use crate::arrays::{Domain, DynamicImage, GridMeta, C32};
use crate::error::{Error, Result};
use crate::util::stream_rng;

const SUPERSAMPLE: usize = 4;

// rng stream purposes
const STREAM_GEOM: u64 = 1;
const STREAM_COILS: u64 = 2;
pub(crate) const STREAM_NOISE: u64 = 3;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PhantomConfig {
    pub ny: usize,
    pub nx: usize,
    pub n_frames: usize,
    pub dt_ms: f64,
    pub dy_mm: f64,
    pub dx_mm: f64,
    pub fetal_hr_bpm: f64,
    pub resp_period_ms: f64,
    pub resp_amp_px: f64,
    pub heart_radius_px: f64,
    pub heart_pulsation_frac: f64,
    pub n_coils: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            ny: 152,
            nx: 400,
            n_frames: 64,
            dt_ms: 72.0,
            dy_mm: 2.0,
            dx_mm: 2.0,
            fetal_hr_bpm: 140.0,
            resp_period_ms: 2000.0,
            resp_amp_px: 2.0,
            heart_radius_px: 8.0,
            heart_pulsation_frac: 0.15,
            n_coils: 28,
            noise_sigma: 0.01,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    /// Small configuration that runs the full pipeline on a workstation CPU.
    pub fn desk() -> Self {
        PhantomConfig {
            ny: 64,
            nx: 64,
            n_frames: 32,
            n_coils: 8,
            heart_radius_px: 4.0,
            resp_amp_px: 1.5,
            ..Default::default()
        }
    }

    pub fn meta(&self) -> GridMeta {
        GridMeta { dy_mm: self.dy_mm as f32, dx_mm: self.dx_mm as f32, dt_ms: self.dt_ms as f32 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ny == 0 || self.nx == 0 || self.n_frames == 0 {
            return Err(Error::Config("grid sizes must be positive".into()));
        }
        if self.dt_ms <= 0.0 || self.dy_mm <= 0.0 || self.dx_mm <= 0.0 {
            return Err(Error::Config("voxel/frame spacing must be positive".into()));
        }
        if self.n_coils == 0 {
            return Err(Error::Config("need at least one coil".into()));
        }
        if self.heart_radius_px < 2.0 {
            return Err(Error::Config(format!(
                "heart radius {} px below the 2 px minimum",
                self.heart_radius_px
            )));
        }
        if self.fetal_hr_bpm > 0.0 {
            let period_ms = 60_000.0 / self.fetal_hr_bpm;
            if period_ms / self.dt_ms < 4.0 {
                return Err(Error::Config(format!(
                    "fetal heart period {period_ms:.1} ms under 4 frames at dt={} ms",
                    self.dt_ms
                )));
            }
        }
        if self.heart_pulsation_frac < 0.0 || self.heart_pulsation_frac >= 1.0 {
            return Err(Error::Config("heart_pulsation_frac must be in [0, 1)".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("noise_sigma must be non-negative".into()));
        }
        Ok(())
    }
}

/// Per-coil sensitivity maps and the coil noise covariance.
#[derive(Debug, Clone)]
pub struct CoilModel {
    /// complex maps, axes (coil, y, x)
    pub sensitivities: Array3<C32>,
    /// Hermitian positive-definite coil x coil covariance
    pub noise_cov: Array2<Complex64>,
}

impl CoilModel {
    pub fn n_coils(&self) -> usize {
        self.sensitivities.dim().0
    }

    /// Identity-covariance single uniform coil (used for coil-combined data).
    pub fn uniform_single(ny: usize, nx: usize) -> Self {
        CoilModel {
            sensitivities: Array3::from_elem((1, ny, nx), C32::new(1.0, 0.0)),
            noise_cov: Array2::from_elem((1, 1), Complex64::new(1.0, 0.0)),
        }
    }

    /// Sum over coils of |s|^2 at each pixel.
    pub fn sos_map(&self) -> Array2<f32> {
        let (_, ny, nx) = self.sensitivities.dim();
        let mut out = Array2::<f32>::zeros((ny, nx));
        for s in self.sensitivities.outer_iter() {
            for ((y, x), v) in s.indexed_iter() {
                out[[y, x]] += v.norm_sqr();
            }
        }
        out
    }
}

/// One synthetic scanned case: ground-truth motion, coil model, geometry
/// metadata used by evaluation oracles and figure rendering.
#[derive(Debug, Clone)]
pub struct Subject {
    pub subject_id: u32,
    pub truth: DynamicImage,
    pub coils: CoilModel,
    pub seed: u64,
    pub config: PhantomConfig,
    pub body_center: (f64, f64),
    pub body_semi: (f64, f64),
    pub heart_center: (f64, f64),
    pub heart_radius_px: f64,
}

impl Subject {
    pub fn name(&self) -> String {
        format!("subj_{:03}", self.subject_id)
    }

    /// Row index through the heart centroid (for y-t / y-f profiles).
    pub fn heart_line(&self) -> usize {
        (self.heart_center.0.round() as usize).min(self.truth.ny() - 1)
    }

    /// Boolean heart region of interest with an optional margin in pixels.
    pub fn heart_roi(&self, margin_px: f64) -> Array2<bool> {
        let (ny, nx) = (self.truth.ny(), self.truth.nx());
        let r = self.heart_radius_px * (1.0 + self.config.heart_pulsation_frac) + margin_px;
        Array2::from_shape_fn((ny, nx), |(y, x)| {
            let dy = y as f64 - self.heart_center.0;
            let dx = x as f64 - self.heart_center.1;
            dy * dy + dx * dx <= r * r
        })
    }
}

/// Assemble a subject from externally supplied parts (imported datasets,
/// synthetic test volumes). Geometry metadata falls back to a centered
/// placeholder.
pub fn subject_from_parts(
    subject_id: u32,
    truth: DynamicImage,
    coils: CoilModel,
    cfg: PhantomConfig,
) -> Subject {
    let (ny, nx) = (truth.ny() as f64, truth.nx() as f64);
    Subject {
        subject_id,
        truth,
        coils,
        seed: cfg.seed,
        body_center: (ny / 2.0, nx / 2.0),
        body_semi: (0.4 * ny, 0.45 * nx),
        heart_center: (ny / 2.0, nx / 2.0),
        heart_radius_px: cfg.heart_radius_px,
        config: cfg,
    }
}

struct Ellipse {
    cy: f64,
    cx: f64,
    ay: f64,
    ax: f64,
    value: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let dy = (y - self.cy) / self.ay;
        let dx = (x - self.cx) / self.ax;
        dy * dy + dx * dx <= 1.0
    }
}

/// Deterministically generate one subject from the config and its id.
pub fn generate_subject(cfg: &PhantomConfig, subject_id: u32) -> Result<Subject> {
    cfg.validate()?;
    let mut rng = stream_rng(cfg.seed, &[subject_id as u64, STREAM_GEOM]);
    let (ny, nx, t_frames) = (cfg.ny, cfg.nx, cfg.n_frames);

    // maternal body, jittered per subject
    let body_cy = ny as f64 * (0.5 + 0.02 * (rng.random::<f64>() - 0.5));
    let body_cx = nx as f64 * (0.5 + 0.02 * (rng.random::<f64>() - 0.5));
    let body_ay = ny as f64 * (0.40 + 0.03 * rng.random::<f64>());
    let body_ax = nx as f64 * (0.42 + 0.03 * rng.random::<f64>());
    let body_value = 0.5;

    // static internal structures
    let n_organs = 3 + (rng.random::<f64>() * 3.0) as usize;
    let mut organs = Vec::with_capacity(n_organs);
    for _ in 0..n_organs {
        let theta = rng.random::<f64>() * std::f64::consts::TAU;
        let rad = rng.random::<f64>() * 0.55;
        organs.push(Ellipse {
            cy: body_cy + rad * body_ay * theta.sin(),
            cx: body_cx + rad * body_ax * theta.cos(),
            ay: (0.08 + 0.10 * rng.random::<f64>()) * ny as f64,
            ax: (0.08 + 0.10 * rng.random::<f64>()) * nx as f64,
            value: 0.25 + 0.6 * rng.random::<f64>(),
        });
    }

    // fetal heart disc, placed well inside the body
    let heart_theta = rng.random::<f64>() * std::f64::consts::TAU;
    let heart_rad = 0.15 + 0.30 * rng.random::<f64>();
    let heart_cy = body_cy + heart_rad * body_ay * heart_theta.sin();
    let heart_cx = body_cx + heart_rad * body_ax * heart_theta.cos();
    let heart_r0 = cfg.heart_radius_px;
    let heart_value = 1.0;
    let heart_phase = rng.random::<f64>() * std::f64::consts::TAU;
    let resp_phase = rng.random::<f64>() * std::f64::consts::TAU;

    // the heart (at maximal extent, under maximal respiration shift) must
    // stay inside the body ellipse
    let r_max = heart_r0 * (1.0 + cfg.heart_pulsation_frac) + cfg.resp_amp_px;
    let margin = {
        let dy = (heart_cy - body_cy) / body_ay;
        let dx = (heart_cx - body_cx) / body_ax;
        1.0 - (dy * dy + dx * dx).sqrt()
    };
    if margin * body_ay.min(body_ax) < r_max {
        return Err(Error::Config(format!(
            "heart (max radius {r_max:.1} px) does not fit inside the body ellipse"
        )));
    }

    // smooth static phase field: linear ramp plus broad gaussian bumps
    let ramp_y = rng.random::<f64>() - 0.5;
    let ramp_x = rng.random::<f64>() - 0.5;
    let mut bumps = Vec::new();
    for _ in 0..3 {
        bumps.push((
            rng.random::<f64>() * ny as f64,
            rng.random::<f64>() * nx as f64,
            (0.25 + 0.35 * rng.random::<f64>()) * ny.max(nx) as f64,
            1.6 * (rng.random::<f64>() - 0.5),
        ));
    }
    let phase_at = |y: f64, x: f64| -> f64 {
        let mut p = ramp_y * (y / ny as f64 - 0.5) + ramp_x * (x / nx as f64 - 0.5);
        for &(by, bx, s, amp) in &bumps {
            let d2 = (y - by) * (y - by) + (x - bx) * (x - bx);
            p += amp * (-d2 / (2.0 * s * s)).exp();
        }
        p
    };

    let omega_heart = std::f64::consts::TAU * cfg.fetal_hr_bpm / 60.0 / 1000.0; // rad per ms
    let omega_resp = if cfg.resp_period_ms > 0.0 {
        std::f64::consts::TAU / cfg.resp_period_ms
    } else {
        0.0
    };

    let mut data = Array3::<C32>::zeros((t_frames, ny, nx));
    let frames: Vec<Array2<C32>> = (0..t_frames)
        .map(|t| {
            let time_ms = t as f64 * cfg.dt_ms;
            let body_shift = cfg.resp_amp_px * (omega_resp * time_ms + resp_phase).sin();
            let hr_phase = omega_heart * time_ms + heart_phase;
            let heart_r = heart_r0 * (1.0 + cfg.heart_pulsation_frac * hr_phase.sin());
            let heart_v = heart_value
                * (1.0
                    + 0.5
                        * cfg.heart_pulsation_frac
                        * (hr_phase + std::f64::consts::FRAC_PI_2).sin());
            let body = Ellipse {
                cy: body_cy + body_shift,
                cx: body_cx,
                ay: body_ay,
                ax: body_ax,
                value: body_value,
            };
            let heart =
                Ellipse { cy: heart_cy, cx: heart_cx, ay: heart_r, ax: heart_r, value: heart_v };
            rasterize(ny, nx, &body, &organs, &heart, &phase_at)
        })
        .collect();
    for (t, frame) in frames.into_iter().enumerate() {
        data.index_axis_mut(ndarray::Axis(0), t).assign(&frame);
    }

    let truth = DynamicImage::new(data, Domain::Xt, cfg.meta())?;
    let coils = synthesize_coils(cfg, cfg.seed ^ ((subject_id as u64) << 1))?;

    Ok(Subject {
        subject_id,
        truth,
        coils,
        seed: cfg.seed,
        config: cfg.clone(),
        body_center: (body_cy, body_cx),
        body_semi: (body_ay, body_ax),
        heart_center: (heart_cy, heart_cx),
        heart_radius_px: heart_r0,
    })
}

fn rasterize(
    ny: usize,
    nx: usize,
    body: &Ellipse,
    organs: &[Ellipse],
    heart: &Ellipse,
    phase_at: &dyn Fn(f64, f64) -> f64,
) -> Array2<C32> {
    let ss = SUPERSAMPLE as f64;
    Array2::from_shape_fn((ny, nx), |(y, x)| {
        let mut acc = 0.0f64;
        for sy in 0..SUPERSAMPLE {
            let py = y as f64 + (sy as f64 + 0.5) / ss - 0.5;
            for sx in 0..SUPERSAMPLE {
                let px = x as f64 + (sx as f64 + 0.5) / ss - 0.5;
                // later shapes paint over earlier ones
                let mut v = 0.0;
                if body.contains(py, px) {
                    v = body.value;
                    for organ in organs {
                        if organ.contains(py, px) {
                            v = organ.value;
                        }
                    }
                    if heart.contains(py, px) {
                        v = heart.value;
                    }
                }
                acc += v;
            }
        }
        let mag = acc / (ss * ss);
        let ph = phase_at(y as f64, x as f64);
        C32::new((mag * ph.cos()) as f32, (mag * ph.sin()) as f32)
    })
}

/// Smooth complex coil sensitivity maps (gaussian lobes on a ring around the
/// FOV with per-coil phase) plus a random Hermitian PD noise covariance with
/// unit diagonal. A single-coil request yields the uniform unit map.
pub fn synthesize_coils(cfg: &PhantomConfig, seed: u64) -> Result<CoilModel> {
    if cfg.n_coils == 0 {
        return Err(Error::Config("need at least one coil".into()));
    }
    let (ny, nx, nc) = (cfg.ny, cfg.nx, cfg.n_coils);
    if nc == 1 {
        return Ok(CoilModel::uniform_single(ny, nx));
    }
    let mut rng = stream_rng(seed, &[STREAM_COILS]);

    let mut sens = Array3::<C32>::zeros((nc, ny, nx));
    let ring_y = 0.62 * ny as f64;
    let ring_x = 0.62 * nx as f64;
    let sigma = 0.75 * ny.max(nx) as f64;
    for c in 0..nc {
        let theta =
            std::f64::consts::TAU * (c as f64 + 0.3 * (rng.random::<f64>() - 0.5)) / nc as f64;
        let cy = ny as f64 / 2.0 + ring_y * theta.sin();
        let cx = nx as f64 / 2.0 + ring_x * theta.cos();
        let phase0 = std::f64::consts::TAU * rng.random::<f64>();
        let ramp = 0.5 * (rng.random::<f64>() - 0.5);
        for y in 0..ny {
            for x in 0..nx {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                let mag = (-d2 / (2.0 * sigma * sigma)).exp();
                let ph = phase0 + ramp * (y as f64 + x as f64) / (ny + nx) as f64;
                sens[[c, y, x]] = C32::new((mag * ph.cos()) as f32, (mag * ph.sin()) as f32);
            }
        }
    }

    // random Hermitian PD covariance, normalized to unit diagonal
    let mut b = Array2::<Complex64>::zeros((nc, nc));
    for v in b.iter_mut() {
        *v =
            Complex64::new(0.35 * (rng.random::<f64>() - 0.5), 0.35 * (rng.random::<f64>() - 0.5));
    }
    let bh = b.mapv(|z| z.conj()).reversed_axes();
    let mut cov = b.dot(&bh);
    for i in 0..nc {
        cov[[i, i]] += Complex64::new(1.0, 0.0);
    }
    let diag: Vec<f64> = (0..nc).map(|i| cov[[i, i]].re.sqrt()).collect();
    for i in 0..nc {
        for j in 0..nc {
            cov[[i, j]] /= Complex64::new(diag[i] * diag[j], 0.0);
        }
    }

    Ok(CoilModel { sensitivities: sens, noise_cov: cov })
}
