//! Soft-gated constant-velocity filters for the planar (px) and axial (mm)
//! tip error, with split-conformal gating, crop-consistency depth fusion
//! and a covariance watchdog.

mod fusion;
mod tracker;

pub use fusion::{extract_peaks, heat_zscore, select_candidate, Candidate, FusionParams, History, Selection};
pub use tracker::{Snapshot, TrackInput, Tracker, TrackerConfig};

use nalgebra::{DMatrix, DVector, Matrix2, Matrix4, Vector2, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{damped_pinv, CameraModel, Mat3, Vec2, Vec3};

/// Score-to-noise mapping, conformal level and confidence thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GateParams {
    pub tau_x: f64,
    pub sigma2_x0: f64,
    pub gamma_x: f64,
    pub tau_z: f64,
    pub sigma2_z0: f64,
    pub gamma_z: f64,
    /// Target coverage `1 − α`.
    pub level: f64,
    /// Calibrated nonconformity quantile.
    pub q: f64,
    /// Minimum confidence for cold start and visibility.
    pub tau_det: f64,
    /// Detections below this confidence are dropped before the filter.
    pub tau_loss: f64,
    /// Gate value above which an update counts as valid for the watchdog.
    pub tau_safe: f64,
    /// Watchdog horizon (s).
    pub t_max: f64,
}

impl Default for GateParams {
    fn default() -> Self {
        Self {
            tau_x: 6.30,
            sigma2_x0: 4.0,
            gamma_x: 1.0,
            tau_z: 1.0,
            sigma2_z0: 0.003 * 0.003,
            gamma_z: 1.0,
            level: 0.95,
            q: CHI2_2_95,
            tau_det: 0.35,
            tau_loss: 0.1,
            tau_safe: 0.05,
            t_max: 1.0,
        }
    }
}

/// 95th percentile of χ² with two degrees of freedom.
pub const CHI2_2_95: f64 = 5.991464547107979;

impl GateParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("tau_x", self.tau_x),
            ("sigma2_x0", self.sigma2_x0),
            ("gamma_x", self.gamma_x),
            ("tau_z", self.tau_z),
            ("sigma2_z0", self.sigma2_z0),
            ("gamma_z", self.gamma_z),
            ("q", self.q),
            ("tau_det", self.tau_det),
            ("tau_loss", self.tau_loss),
            ("tau_safe", self.tau_safe),
            ("t_max", self.t_max),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} = {v} must be positive")));
            }
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::Config(format!("coverage level {} outside (0, 1)", self.level)));
        }
        Ok(())
    }

    /// Maximum open-loop propagation steps.
    pub fn n_max(&self, dt: f64) -> usize {
        (self.t_max / dt - 1e-9).ceil().max(1.0) as usize
    }
}

/// Process noise and cold-start priors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    /// Planar acceleration noise intensity (px²/s³).
    pub q0x: f64,
    /// Axial acceleration noise intensity (mm²/s³).
    pub q0z: f64,
    pub prior_pos_px: f64,
    pub prior_vel_px: f64,
    pub prior_pos_mm: f64,
    pub prior_vel_mm: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self { q0x: 200.0, q0z: 0.01, prior_pos_px: 50.0, prior_vel_px: 100.0, prior_pos_mm: 1.0, prior_vel_mm: 1.0 }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        for v in [self.q0x, self.q0z, self.prior_pos_px, self.prior_vel_px, self.prior_pos_mm, self.prior_vel_mm] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config("filter noise and priors must be finite and >= 0".into()));
            }
        }
        Ok(())
    }
}

/// Planar state `(e_x, e_y, ė_x, ė_y)` and axial state `(e_z, ė_z)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterState {
    pub x: Vector4<f64>,
    pub px: Matrix4<f64>,
    pub z: Vector2<f64>,
    pub pz: Matrix2<f64>,
    pub t: f64,
    pub last_valid_x: f64,
    pub last_valid_z: f64,
    /// Steps since the last valid planar / axial update.
    pub miss_x: usize,
    pub miss_z: usize,
    pub init_x: bool,
    pub init_z: bool,
}

impl Default for FilterState {
    fn default() -> Self {
        Self {
            x: Vector4::zeros(),
            px: Matrix4::zeros(),
            z: Vector2::zeros(),
            pz: Matrix2::zeros(),
            t: 0.0,
            last_valid_x: 0.0,
            last_valid_z: 0.0,
            miss_x: 0,
            miss_z: 0,
            init_x: false,
            init_z: false,
        }
    }
}

impl FilterState {
    pub fn planar_pos(&self) -> Vec2 {
        Vec2::new(self.x[0], self.x[1])
    }

    pub fn planar_vel(&self) -> Vec2 {
        Vec2::new(self.x[2], self.x[3])
    }

    pub fn init_planar(&mut self, e: Vec2, cfg: &FilterConfig) {
        self.x = Vector4::new(e.x, e.y, 0.0, 0.0);
        let (a, b) = (cfg.prior_pos_px.powi(2), cfg.prior_vel_px.powi(2));
        self.px = Matrix4::from_diagonal(&Vector4::new(a, a, b, b));
        self.init_x = true;
        self.miss_x = 0;
        self.last_valid_x = self.t;
    }

    pub fn init_axial(&mut self, e: f64, cfg: &FilterConfig) {
        self.z = Vector2::new(e, 0.0);
        self.pz = Matrix2::new(cfg.prior_pos_mm.powi(2), 0.0, 0.0, cfg.prior_vel_mm.powi(2));
        self.init_z = true;
        self.miss_z = 0;
        self.last_valid_z = self.t;
    }
}

/// `q0·[[dt³/3, dt²/2], [dt²/2, dt]]`.
pub fn q_block(dt: f64, q0: f64) -> Matrix2<f64> {
    Matrix2::new(dt.powi(3) / 3.0, dt * dt / 2.0, dt * dt / 2.0, dt) * q0
}

pub fn f_block(dt: f64) -> Matrix2<f64> {
    Matrix2::new(1.0, dt, 0.0, 1.0)
}

/// Planar transition and noise in `(e_x, e_y, ė_x, ė_y)` ordering.
pub fn planar_model(dt: f64, q0: f64) -> (Matrix4<f64>, Matrix4<f64>) {
    let f = f_block(dt);
    let q = q_block(dt, q0);
    let mut ff = Matrix4::zeros();
    let mut qq = Matrix4::zeros();
    for axis in 0..2 {
        for (r, c) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            ff[(axis + 2 * r, axis + 2 * c)] = f[(r, c)];
            qq[(axis + 2 * r, axis + 2 * c)] = q[(r, c)];
        }
    }
    (ff, qq)
}

fn sym4(p: &Matrix4<f64>) -> Matrix4<f64> {
    let s = (p + p.transpose()) * 0.5;
    let e = s.symmetric_eigen();
    if e.eigenvalues.iter().all(|&v| v >= 0.0) {
        return s;
    }
    let d = Matrix4::from_diagonal(&e.eigenvalues.map(|v| v.max(0.0)));
    let r = e.eigenvectors * d * e.eigenvectors.transpose();
    (r + r.transpose()) * 0.5
}

fn sym2(p: &Matrix2<f64>) -> Matrix2<f64> {
    let s = (p + p.transpose()) * 0.5;
    let e = s.symmetric_eigen();
    if e.eigenvalues.iter().all(|&v| v >= 0.0) {
        return s;
    }
    let d = Matrix2::from_diagonal(&e.eigenvalues.map(|v| v.max(0.0)));
    let r = e.eigenvectors * d * e.eigenvectors.transpose();
    (r + r.transpose()) * 0.5
}

/// Time update of both channels.
pub fn predict(state: &FilterState, dt: f64, q0x: f64, q0z: f64) -> FilterState {
    predict_with_input(state, dt, q0x, q0z, Vec2::zeros(), 0.0)
}

/// Time update that also applies the known commanded displacement of the
/// error (planar px, axial mm) over the step.
pub fn predict_with_input(
    state: &FilterState,
    dt: f64,
    q0x: f64,
    q0z: f64,
    shift_px: Vec2,
    shift_z: f64,
) -> FilterState {
    let mut s = *state;
    s.t += dt;
    if s.init_x {
        let (f, q) = planar_model(dt, q0x);
        s.x = f * s.x;
        s.x[0] += shift_px.x;
        s.x[1] += shift_px.y;
        s.px = sym4(&(f * s.px * f.transpose() + q));
    }
    if s.init_z {
        let f = f_block(dt);
        s.z = f * s.z;
        s.z[0] += shift_z;
        s.pz = sym2(&(f * s.pz * f.transpose() + q_block(dt, q0z)));
    }
    s.miss_x += 1;
    s.miss_z += 1;
    s
}

/// Squared Mahalanobis distance `εᵀ S⁻¹ ε`.
pub fn nonconformity(innovation: &DVector<f64>, s: &DMatrix<f64>) -> Result<f64> {
    if s.nrows() != innovation.len() || s.ncols() != innovation.len() {
        return Err(Error::Domain("innovation and covariance sizes differ".into()));
    }
    let ch = s.clone().cholesky().ok_or(Error::Singular("innovation covariance"))?;
    let w = ch.solve(innovation);
    Ok(innovation.dot(&w))
}

fn mahal2(e: &Vec2, s: &Matrix2<f64>) -> Result<f64> {
    let inv = s.try_inverse().ok_or(Error::Singular("innovation covariance"))?;
    Ok((e.transpose() * inv * e)[0])
}

/// Split-conformal quantile with conservative (higher) rank.
pub fn conformal_calibrate(scores: &[f64], level: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Empty("conformal scores"));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Domain(format!("level {level} outside (0, 1)")));
    }
    let mut v = scores.to_vec();
    v.sort_by(f64::total_cmp);
    let k = ((v.len() as f64) * level - 1e-9).ceil() as usize;
    Ok(v[k.clamp(1, v.len()) - 1])
}

/// `min(c, max(0, 1 − d²/q))`.
pub fn fuse_score(conf: f64, d2: f64, q: f64) -> f64 {
    conf.clamp(0.0, 1.0).min((1.0 - d2 / q).max(0.0))
}

#[inline]
pub fn gate(score: f64, tau: f64) -> f64 {
    (score / tau).clamp(0.0, 1.0)
}

/// Per-update gate diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GateDiag {
    pub d2: f64,
    pub score: f64,
    pub g: f64,
    pub r: f64,
    pub cold_start: bool,
    pub valid: bool,
}

/// Planar measurement update with a soft gate on the Kalman gain.
pub fn gated_update_planar(
    state: &FilterState,
    pixel_obs: Vec2,
    target: Vec2,
    conf: f64,
    params: &GateParams,
    cfg: &FilterConfig,
) -> (FilterState, GateDiag) {
    let y = pixel_obs - target;
    let mut s = *state;
    if !s.init_x {
        if conf >= params.tau_det {
            s.init_planar(y, cfg);
            return (s, GateDiag { g: 1.0, score: conf, cold_start: true, valid: true, ..Default::default() });
        }
        return (s, GateDiag::default());
    }
    let pred = Vec2::new(s.x[0], s.x[1]);
    let eps = y - pred;
    let phh = s.px.fixed_view::<2, 2>(0, 0).into_owned();
    let d2 = {
        let s0 = phh + Matrix2::identity() * params.sigma2_x0;
        mahal2(&eps, &s0).unwrap_or(f64::INFINITY)
    };
    let score = fuse_score(conf, d2, params.q);
    let g = gate(score, params.tau_x);
    let r = params.sigma2_x0 * (-params.gamma_x * score).exp();
    apply_planar(&mut s, eps, g, r);
    let valid = g > params.tau_safe;
    if valid {
        s.miss_x = 0;
        s.last_valid_x = s.t;
    }
    (s, GateDiag { d2, score, g, r, cold_start: false, valid })
}

/// Planar correction with explicit gate and isotropic noise `r·I₂`.
pub fn apply_planar(s: &mut FilterState, eps: Vec2, g: f64, r: f64) {
    let phh = s.px.fixed_view::<2, 2>(0, 0).into_owned();
    let sm = phh + Matrix2::identity() * r;
    let Some(sinv) = sm.try_inverse() else { return };
    let pht = s.px.fixed_view::<4, 2>(0, 0).into_owned();
    let k_nom = pht * sinv;
    s.x += k_nom * eps * g;
    let mut kh = Matrix4::zeros();
    kh.fixed_view_mut::<4, 2>(0, 0).copy_from(&(k_nom * g));
    s.px = sym4(&((Matrix4::identity() - kh) * s.px));
}

/// Nonconformity of an observation against the current planar prediction,
/// with measurement noise `σ²_x0·I`.
pub fn planar_nonconformity(state: &FilterState, y: Vec2, params: &GateParams) -> Option<f64> {
    if !state.init_x {
        return None;
    }
    let eps = y - state.planar_pos();
    let s0 = state.px.fixed_view::<2, 2>(0, 0).into_owned() + Matrix2::identity() * params.sigma2_x0;
    mahal2(&eps, &s0).ok()
}

/// Crop-consistency depth fusion output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthFusion {
    pub y: f64,
    pub spread: f64,
    pub g: f64,
    pub r: f64,
}

/// Mean and population spread of per-crop depth errors.
pub fn fuse_depth_crops(estimates: &[f64], params: &GateParams) -> Result<DepthFusion> {
    if estimates.len() < 2 {
        return Err(Error::Domain(format!("need >= 2 crop estimates, got {}", estimates.len())));
    }
    let n = estimates.len() as f64;
    let y = estimates.iter().sum::<f64>() / n;
    let spread = (estimates.iter().map(|e| (e - y) * (e - y)).sum::<f64>() / n).sqrt();
    Ok(DepthFusion {
        y,
        spread,
        g: (1.0 - spread / params.tau_z).clamp(0.0, 1.0),
        r: params.sigma2_z0 * (params.gamma_z * spread).exp(),
    })
}

/// Default crop offsets (px): center plus ±10 px on each axis.
pub const CROP_OFFSETS: [[f64; 2]; 5] = [[0.0, 0.0], [10.0, 0.0], [-10.0, 0.0], [0.0, 10.0], [0.0, -10.0]];

/// Axial measurement update with an externally supplied gate and noise.
pub fn gated_update_axial(
    state: &FilterState,
    fused: &DepthFusion,
    params: &GateParams,
    cfg: &FilterConfig,
) -> (FilterState, GateDiag) {
    let mut s = *state;
    if !s.init_z {
        if fused.g > params.tau_safe {
            s.init_axial(fused.y, cfg);
            return (s, GateDiag { g: 1.0, score: fused.g, r: fused.r, cold_start: true, valid: true, d2: 0.0 });
        }
        return (s, GateDiag::default());
    }
    let eps = fused.y - s.z[0];
    let sv = s.pz[(0, 0)] + fused.r;
    let d2 = eps * eps / sv;
    let k = Vector2::new(s.pz[(0, 0)], s.pz[(1, 0)]) / sv;
    s.z += k * (fused.g * eps);
    let mut kh = Matrix2::zeros();
    kh[(0, 0)] = fused.g * k[0];
    kh[(1, 0)] = fused.g * k[1];
    s.pz = sym2(&((Matrix2::identity() - kh) * s.pz));
    let valid = fused.g > params.tau_safe;
    if valid {
        s.miss_z = 0;
        s.last_valid_z = s.t;
    }
    (s, GateDiag { d2, score: fused.g, g: fused.g, r: fused.r, cold_start: false, valid })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct WatchdogEvent {
    pub reset_x: bool,
    pub reset_z: bool,
}

/// Resets a channel after `n_max` steps without a valid update.
pub fn watchdog(state: &FilterState, params: &GateParams, dt: f64) -> (FilterState, WatchdogEvent) {
    let n = params.n_max(dt);
    let mut s = *state;
    let mut ev = WatchdogEvent::default();
    if s.init_x && s.miss_x >= n {
        s.init_x = false;
        s.px = Matrix4::zeros();
        s.x = Vector4::zeros();
        ev.reset_x = true;
    }
    if s.init_z && s.miss_z >= n {
        s.init_z = false;
        s.pz = Matrix2::zeros();
        s.z = Vector2::zeros();
        ev.reset_z = true;
    }
    (s, ev)
}

/// Spectral norm of the constant-velocity block `[[1, dt], [0, 1]]`.
pub fn cv_norm(dt: f64) -> f64 {
    0.5 * (dt + (dt * dt + 4.0).sqrt())
}

/// Worst-case trace of the planar covariance after at most `n_max`
/// open-loop steps from an anchor covariance of trace `anchor_trace`.
pub fn planar_trace_bound(anchor_trace: f64, dt: f64, q0: f64, n_max: usize) -> f64 {
    let f2 = cv_norm(dt).powi(2);
    let tq = 2.0 * q0 * (dt.powi(3) / 3.0 + dt);
    let mut acc = 0.0;
    let mut fk = 1.0;
    for _ in 0..=n_max {
        acc += fk * tq;
        fk *= f2;
    }
    acc + f2.powi(n_max as i32) * anchor_trace
}

/// Lifts a pixel error into a robot-frame displacement (mm) through the
/// pseudo-inverse of `L_img·R̂`.
pub fn lift_planar_error(e_px: Vec2, r_hat: &Mat3, cam: &CameraModel) -> Result<Vec3> {
    let m = cam.l_img() * r_hat;
    let a = DMatrix::from_fn(2, 3, |i, j| m[(i, j)]);
    let sv = a.clone().svd(false, false).singular_values;
    let smax = sv.max();
    let smin = sv.min();
    if !(smax > 0.0) || smin / smax < 1e-9 {
        return Err(Error::RankDeficient("L_img·R̂ lost row rank".into()));
    }
    let pinv = damped_pinv(&a, &DMatrix::identity(3, 3), 0.0)?;
    let v = pinv * DVector::from_vec(vec![e_px.x, e_px.y]);
    Ok(Vec3::new(v[0], v[1], v[2]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_velocity_prediction() {
        let mut s = FilterState::default();
        s.init_planar(Vec2::zeros(), &FilterConfig::default());
        s.x[2] = 10.0;
        let p = predict(&s, 0.1, 0.0, 0.0);
        assert!((p.x[0] - 1.0).abs() < 1e-15 && p.x[1] == 0.0);
    }

    #[test]
    fn gate_example_values() {
        assert!((gate(0.5, 6.30) - 0.0793650793650793).abs() < 1e-12);
        assert!((4.0 * (-0.5f64).exp() - 2.426122638850534).abs() < 1e-12);
        assert_eq!(fuse_score(0.8, 1.0, 2.0), 0.5);
        assert_eq!(fuse_score(1.0, 3.0, 2.0), 0.0);
    }

    #[test]
    fn conformal_rank() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(conformal_calibrate(&v, 0.95).unwrap(), 95.0);
        assert_eq!(conformal_calibrate(&[2.0; 7], 0.9).unwrap(), 2.0);
    }

    #[test]
    fn nonconformity_identity() {
        let e = DVector::from_vec(vec![3.0, 4.0]);
        assert_eq!(nonconformity(&e, &DMatrix::identity(2, 2)).unwrap(), 25.0);
        assert!(nonconformity(&e, &DMatrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn lift_identity_scale_two() {
        let cam = CameraModel::new(2.0, [0.0, 0.0], 100, 100).unwrap();
        let v = lift_planar_error(Vec2::new(4.0, -2.0), &Mat3::identity(), &cam).unwrap();
        assert!((v - Vec3::new(2.0, -1.0, 0.0)).norm() < 1e-12);
    }
}
