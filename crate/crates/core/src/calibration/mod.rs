//! Markerless hand-eye calibration from robot poses and tip pixels.

mod chamfer;
mod loss;
mod metrics;
pub mod optimize;

pub use chamfer::{chamfer_bidirectional, chamfer_squared_mean, chamfer_with_index, paired_squared_mean, NnIndex};
pub use loss::{huber, velocity_loss, velocity_loss_pairs, velocity_pairs, VelPair};
pub use metrics::{metrics_report, pearson, trimmed_mean_std, Diagnostics};

use nalgebra::{Matrix2x3, Matrix3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    euler_matrix, project_to_so3, project_weak, rotation_to_euler, CameraModel, EulerZYX, Mat3,
    ToolOffset, Vec2, Vec3,
};
use crate::scenario::WarmupLog;
use optimize::{minimize_box, BoxOptions};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibConfig {
    pub lambda_vel: f64,
    pub kappa: f64,
    /// Weight of the translation-norm regulariser (px per mm).
    pub a_t: f64,
    pub euler_lower: [f64; 3],
    pub euler_upper: [f64; 3],
    /// Cap on the summed per-axis variance of tip positions (mm²).
    pub var_eps: f64,
    pub starts: usize,
    /// Fix (θx, θy) to measured values.
    pub freeze_tilt: Option<[f64; 2]>,
    pub delta_phi_bound: f64,
    pub max_iters: usize,
    /// Frames per ChamferMax window.
    pub window: usize,
}

impl Default for CalibConfig {
    fn default() -> Self {
        let (lo, hi) = EulerZYX::default_bounds();
        Self {
            lambda_vel: 0.10,
            kappa: 0.12,
            a_t: 1e-3,
            euler_lower: lo,
            euler_upper: hi,
            var_eps: 10.0,
            starts: 8,
            freeze_tilt: None,
            delta_phi_bound: 0.05,
            max_iters: 300,
            window: 30,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CalibProblem<'a> {
    pub log: &'a WarmupLog,
    pub camera: CameraModel,
    pub tool_init: ToolOffset,
    pub tool_length_max: f64,
    pub config: CalibConfig,
}

impl<'a> CalibProblem<'a> {
    pub fn new(log: &'a WarmupLog, camera: CameraModel) -> Self {
        Self { log, camera, tool_init: ToolOffset::zero(), tool_length_max: 100.0, config: CalibConfig::default() }
    }

    pub fn with_config(mut self, config: CalibConfig) -> Self {
        self.config = config;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.camera.validate()?;
        if !(self.config.kappa > 0.0) {
            return Err(Error::Config("kappa must be > 0".into()));
        }
        if self.config.lambda_vel < 0.0 || self.config.a_t < 0.0 {
            return Err(Error::Config("weights must be non-negative".into()));
        }
        if self.log.len() < 2 || self.log.valid_count() < 2 {
            return Err(Error::Domain(format!(
                "need at least 2 frames and 2 valid observations (have {} / {})",
                self.log.len(),
                self.log.valid_count()
            )));
        }
        if self.config.starts == 0 {
            return Err(Error::Config("start count must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    BiChamfer,
    Euclidean,
    JacobianRegression,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Losses {
    pub chamfer: f64,
    pub vel: f64,
    pub reg: f64,
    pub penalty: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartReport {
    pub index: usize,
    pub f_start: f64,
    pub f_final: f64,
    pub iters: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibResult {
    pub method: Method,
    pub euler: EulerZYX,
    pub rotation: Mat3,
    pub tool: ToolOffset,
    pub t_vec: Vec3,
    pub delta_phi: Vec3,
    pub losses: Losses,
    pub diagnostics: Diagnostics,
    /// Motion-variance constraint could not be met.
    pub infeasible: bool,
    pub tip_variance: f64,
    pub starts: Vec<StartReport>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Fit {
    Chamfer,
    Paired,
}

struct Objective<'a> {
    log: &'a WarmupLog,
    cam: CameraModel,
    cfg: CalibConfig,
    fit: Fit,
    valid: Vec<usize>,
    obs: Vec<Vec2>,
    obs_index: NnIndex,
    pairs: Vec<VelPair>,
    mu: f64,
}

const NP: usize = 12;

fn unpack(x: &[f64]) -> (Mat3, Vec3, Vec3, Vec3) {
    (
        euler_matrix(x[0], x[1], x[2]),
        Vec3::new(x[3], x[4], x[5]),
        Vec3::new(x[6], x[7], x[8]),
        Vec3::new(x[9], x[10], x[11]),
    )
}

fn tips(log: &WarmupLog, r_tip: &Vec3) -> Vec<Vec3> {
    log.frames.iter().map(|f| f.pose.rotation * r_tip + f.pose.translation).collect()
}

fn total_variance(p: &[Vec3]) -> f64 {
    let n = p.len() as f64;
    let mean = p.iter().fold(Vec3::zeros(), |a, b| a + b) / n;
    p.iter().map(|q| (q - mean).norm_squared()).sum::<f64>() / n
}

impl<'a> Objective<'a> {
    fn new(problem: &CalibProblem<'a>, fit: Fit) -> Self {
        let log = problem.log;
        let valid: Vec<usize> = (0..log.len()).filter(|&i| log.frames[i].valid).collect();
        let obs: Vec<Vec2> = valid.iter().map(|&i| log.frames[i].pixel_obs.unwrap()).collect();
        Self {
            log,
            cam: problem.camera,
            cfg: problem.config,
            fit,
            obs_index: NnIndex::new(&obs),
            valid,
            obs,
            pairs: velocity_pairs(log),
            mu: 1.0,
        }
    }

    fn losses(&self, x: &[f64]) -> Losses {
        let (r, t, rt, phi) = unpack(x);
        let tp = tips(self.log, &rt);
        let proj: Vec<Vec2> = tp.iter().map(|p| project_weak(&self.cam, &r, &t, p)).collect();
        let fit = match self.fit {
            Fit::Chamfer => chamfer_with_index(&proj, &self.obs_index, &self.obs),
            Fit::Paired => {
                self.valid.iter().zip(&self.obs).map(|(&i, q)| (proj[i] - q).norm()).sum::<f64>()
                    / self.valid.len() as f64
            }
        };
        let vel = if self.cfg.lambda_vel > 0.0 {
            velocity_loss_pairs(&self.pairs, &tp, &r, &t, &self.cam, &phi, self.cfg.kappa)
        } else {
            0.0
        };
        let reg = self.cfg.a_t * t.norm();
        let excess = (total_variance(&tp) - self.cfg.var_eps).max(0.0);
        let penalty = self.mu * excess * excess;
        Losses {
            chamfer: fit,
            vel,
            reg,
            penalty,
            total: fit + self.cfg.lambda_vel * vel + reg + penalty,
        }
    }

    fn value(&self, x: &[f64]) -> f64 {
        self.losses(x).total
    }
}

/// Least-squares fit of pixel increments against tip increments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JacobianFit {
    pub g: Matrix2x3<f64>,
    /// Rotation implied by orthogonal Procrustes on `G / s`.
    pub rotation: Mat3,
    pub pairs: usize,
}

/// Ridge regression `Δq ≈ G Δp³ᴰ` over consecutive valid frames.
pub fn baseline_jacobian_regression(log: &WarmupLog, cam: &CameraModel) -> Result<JacobianFit> {
    let pairs = velocity_pairs(log);
    if pairs.len() < 6 {
        return Err(Error::Domain(format!("need >= 6 valid velocity pairs, have {}", pairs.len())));
    }
    let mut xx = Matrix3::<f64>::zeros();
    let mut yx = Matrix2x3::<f64>::zeros();
    for p in &pairs {
        let dp = log.frames[p.j].tip3d - log.frames[p.i].tip3d;
        xx += dp * dp.transpose();
        yx += p.dq * dp.transpose();
    }
    let ev = xx.symmetric_eigen().eigenvalues;
    let mut e: Vec<f64> = ev.iter().cloned().collect();
    e.sort_by(|a, b| b.total_cmp(a));
    if !(e[0] > 0.0) || e[1] / e[0] < 1e-8 {
        return Err(Error::RankDeficient("motion spans fewer than two directions".into()));
    }
    let ridge = 1e-9 * xx.trace();
    let inv = (xx + Matrix3::identity() * ridge)
        .try_inverse()
        .ok_or(Error::Singular("jacobian regression"))?;
    let g = yx * inv;
    let r1 = g.row(0).transpose() / cam.scale;
    let r2 = g.row(1).transpose() / cam.scale;
    let r3 = r1.cross(&r2);
    let m = Matrix3::from_rows(&[r1.transpose(), r2.transpose(), r3.transpose()]);
    Ok(JacobianFit { g, rotation: project_to_so3(&m), pairs: pairs.len() })
}

/// Translation that aligns projected and observed centroids (`t_z = 0`).
fn centroid_translation(log: &WarmupLog, cam: &CameraModel, r: &Mat3, r_tip: &Vec3) -> Vec3 {
    let tp = tips(log, r_tip);
    let mut acc = Vec2::zeros();
    let mut n: f64 = 0.0;
    for (i, f) in log.frames.iter().enumerate() {
        if let Some(q) = f.pixel_obs {
            let pc = r * tp[i];
            acc += (q - cam.c()) / cam.scale - Vec2::new(pc.x, pc.y);
            n += 1.0;
        }
    }
    let a = acc / n.max(1.0);
    Vec3::new(a.x, a.y, 0.0)
}

fn radical_inverse(mut i: usize, base: usize) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

fn bounds(problem: &CalibProblem, rotation_only_tool: bool) -> (Vec<f64>, Vec<f64>) {
    let c = &problem.config;
    let mut lo = vec![0.0; NP];
    let mut hi = vec![0.0; NP];
    for k in 0..3 {
        lo[k] = c.euler_lower[k];
        hi[k] = c.euler_upper[k];
    }
    if let Some([x, y]) = c.freeze_tilt {
        lo[0] = x;
        hi[0] = x;
        lo[1] = y;
        hi[1] = y;
    }
    for k in 3..6 {
        lo[k] = -1e4;
        hi[k] = 1e4;
    }
    let rt = problem.tool_init.r_tip;
    let lmax = problem.tool_length_max / 3f64.sqrt();
    for k in 0..3 {
        if rotation_only_tool {
            lo[6 + k] = rt[k];
            hi[6 + k] = rt[k];
        } else {
            lo[6 + k] = -lmax;
            hi[6 + k] = lmax;
        }
    }
    let pb = if c.lambda_vel > 0.0 { c.delta_phi_bound } else { 0.0 };
    for k in 9..12 {
        lo[k] = -pb;
        hi[k] = pb;
    }
    (lo, hi)
}

fn start_points(problem: &CalibProblem, lo: &[f64], hi: &[f64]) -> Vec<Vec<f64>> {
    let cam = &problem.camera;
    let rt = problem.tool_init.r_tip;
    let mut angles: Vec<[f64; 3]> = Vec::new();
    if let Ok(j) = baseline_jacobian_regression(problem.log, cam) {
        let e = rotation_to_euler(&j.rotation);
        angles.push(e.angles());
    }
    let grid = problem.config.starts.saturating_sub(angles.len()).max(if angles.is_empty() { 1 } else { 0 });
    let tilt = 0.2;
    for k in 0..grid {
        let yaw = -std::f64::consts::PI + (k as f64 + 0.5) * std::f64::consts::TAU / grid as f64;
        let ax = tilt * (2.0 * radical_inverse(k + 1, 2) - 1.0);
        let ay = tilt * (2.0 * radical_inverse(k + 1, 3) - 1.0);
        angles.push([ax, ay, yaw]);
    }
    angles
        .into_iter()
        .map(|a| {
            let mut x = vec![0.0; NP];
            for k in 0..3 {
                x[k] = a[k].clamp(lo[k], hi[k]);
            }
            let r = euler_matrix(x[0], x[1], x[2]);
            let t = centroid_translation(problem.log, cam, &r, &rt);
            x[3] = t.x;
            x[4] = t.y;
            x[5] = t.z;
            x[6] = rt.x;
            x[7] = rt.y;
            x[8] = rt.z;
            x
        })
        .collect()
}

fn tool_is_observable(log: &WarmupLog) -> bool {
    let r0 = log.frames[0].pose.rotation;
    log.frames.iter().any(|f| (f.pose.rotation - r0).abs().max() > 1e-6)
}

fn solve(problem: &CalibProblem, fit: Fit, method: Method) -> Result<CalibResult> {
    problem.validate()?;
    let cfg = problem.config;
    let observable = tool_is_observable(problem.log);
    let (lo, hi) = bounds(problem, !observable);
    let starts = start_points(problem, &lo, &hi);
    let opts = BoxOptions { max_iters: cfg.max_iters, ..Default::default() };

    let results: Vec<(Vec<f64>, f64, StartReport, f64)> = std::thread::scope(|scope| {
        let handles: Vec<_> = starts
            .iter()
            .enumerate()
            .map(|(idx, x0)| {
                let lo = &lo;
                let hi = &hi;
                let opts = &opts;
                scope.spawn(move || {
                    let mut obj = Objective::new(problem, fit);
                    let f0 = obj.value(x0);
                    let mut r = minimize_box(|x| obj.value(x), x0, lo, hi, opts);
                    let mut iters = r.iters;
                    // ramp the variance penalty until satisfied
                    for _ in 0..4 {
                        if obj.losses(&r.x).penalty <= 0.0 || !observable {
                            break;
                        }
                        obj.mu *= 100.0;
                        r = minimize_box(|x| obj.value(x), &r.x.clone(), lo, hi, opts);
                        iters += r.iters;
                    }
                    obj.mu = 1.0;
                    let f_final = obj.value(&r.x);
                    let rep = StartReport { index: idx, f_start: f0, f_final, iters, converged: r.converged };
                    (r.x, f_final, rep, f0)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("start worker panicked")).collect()
    });

    let mut best: Option<usize> = None;
    for (i, r) in results.iter().enumerate() {
        if !r.1.is_finite() {
            continue;
        }
        if best.map_or(true, |b| r.1 < results[b].1) {
            best = Some(i);
        }
    }
    let Some(b) = best else {
        let diag: Vec<String> =
            results.iter().map(|r| format!("start {}: f={}", r.2.index, r.1)).collect();
        return Err(Error::NoConvergence(diag.join("; ")));
    };
    let x = results[b].0.clone();
    let obj = Objective::new(problem, fit);
    let losses = obj.losses(&x);
    let (rotation, t_vec, r_tip, delta_phi) = unpack(&x);
    let tp = tips(problem.log, &r_tip);
    let var = total_variance(&tp);
    let euler = EulerZYX::new(x[0], x[1], x[2]).with_bounds(cfg.euler_lower, cfg.euler_upper);
    let mut res = CalibResult {
        method,
        euler,
        rotation,
        tool: ToolOffset { r_tip },
        t_vec,
        delta_phi,
        losses,
        diagnostics: Diagnostics::default(),
        infeasible: var > cfg.var_eps,
        tip_variance: var,
        starts: results.into_iter().map(|r| r.2).collect(),
    };
    res.diagnostics = metrics_report(problem.log, &res, &problem.camera, cfg.window);
    Ok(res)
}

/// Bi-Chamfer + velocity-consistency calibration with multi-start.
pub fn calibrate(problem: &CalibProblem) -> Result<CalibResult> {
    solve(problem, Fit::Chamfer, Method::BiChamfer)
}

/// Same objective with index-paired Euclidean distances in place of Chamfer.
pub fn baseline_euclidean(problem: &CalibProblem) -> Result<CalibResult> {
    solve(problem, Fit::Paired, Method::Euclidean)
}

/// Regression baseline packaged as a full result (translation from centroids).
pub fn jacobian_regression_result(problem: &CalibProblem) -> Result<CalibResult> {
    problem.validate()?;
    let fit = baseline_jacobian_regression(problem.log, &problem.camera)?;
    let r = fit.rotation;
    let rt = problem.tool_init.r_tip;
    let t = centroid_translation(problem.log, &problem.camera, &r, &rt);
    let obj = Objective::new(problem, Fit::Chamfer);
    let mut x = vec![0.0; NP];
    let e = rotation_to_euler(&r);
    x[..3].copy_from_slice(&e.angles());
    x[3..6].copy_from_slice(t.as_slice());
    x[6..9].copy_from_slice(rt.as_slice());
    let var = total_variance(&tips(problem.log, &rt));
    let mut res = CalibResult {
        method: Method::JacobianRegression,
        euler: e,
        rotation: r,
        tool: ToolOffset { r_tip: rt },
        t_vec: t,
        delta_phi: Vec3::zeros(),
        losses: obj.losses(&x),
        diagnostics: Diagnostics::default(),
        infeasible: var > problem.config.var_eps,
        tip_variance: var,
        starts: Vec::new(),
    };
    res.diagnostics = metrics_report(problem.log, &res, &problem.camera, problem.config.window);
    Ok(res)
}

/// Objective value of the Bi-Chamfer problem at explicit parameters.
pub fn objective_value(problem: &CalibProblem, euler: [f64; 3], t_vec: Vec3, r_tip: Vec3, delta_phi: Vec3) -> f64 {
    let obj = Objective::new(problem, Fit::Chamfer);
    let mut x = vec![0.0; NP];
    x[..3].copy_from_slice(&euler);
    x[3..6].copy_from_slice(t_vec.as_slice());
    x[6..9].copy_from_slice(r_tip.as_slice());
    x[9..12].copy_from_slice(delta_phi.as_slice());
    obj.value(&x)
}

/// Start points used by [`calibrate`] (Euler angles only), for inspection.
pub fn start_angles(problem: &CalibProblem) -> Vec<[f64; 3]> {
    let (lo, hi) = bounds(problem, true);
    start_points(problem, &lo, &hi).into_iter().map(|x| [x[0], x[1], x[2]]).collect()
}
