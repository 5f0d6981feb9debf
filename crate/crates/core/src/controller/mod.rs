//! Macro-micro control stack: dead-zone admittance, macro QP, LQR gains,
//! the phase-gated micro law with a virtual depth fixture, damped
//! resolved-rate fusion, the legacy shared controller and a sharpness
//! hill-climb baseline.

mod dare;
mod hillclimb;
mod legacy;
mod qp;
mod robot;

pub use dare::{dare_gain, lqr_gain, riccati_residual, spectral_radius};
pub use hillclimb::{adapt_rate, hillclimb_depth_step, HillClimbParams, HillStep};
pub use legacy::{legacy_integrate, legacy_lyapunov, legacy_shared_step, LegacyParams, LegacyState};
pub use qp::{box_qp, macro_objective_terms, macro_qp, BoxQpSolution, MacroQPParams, MacroQpSolution};
pub use robot::{Gantry3, PlanarArm4, Robot};

use nalgebra::{DMatrix, DVector, Matrix2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{damped_pinv, Vec2, Vec3};

/// Control period (s).
pub const DT: f64 = 0.0333;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdmittanceParams {
    pub m_d: [f64; 3],
    pub b_d: [f64; 3],
    pub deadzone: [f64; 3],
    /// Speed cap (m/s).
    pub v_max: f64,
    pub dt: f64,
}

impl Default for AdmittanceParams {
    fn default() -> Self {
        Self { m_d: [1.0; 3], b_d: [12.0; 3], deadzone: [1.0; 3], v_max: 0.01, dt: DT }
    }
}

impl AdmittanceParams {
    pub fn validate(&self) -> Result<()> {
        if self.m_d.iter().chain(&self.b_d).any(|&v| !(v > 0.0)) || !(self.dt > 0.0) || !(self.v_max > 0.0) {
            return Err(Error::Config("admittance mass, damping, dt and v_max must be positive".into()));
        }
        if self.deadzone.iter().any(|&d| !(d >= 0.0)) {
            return Err(Error::Config("dead-zone widths must be >= 0".into()));
        }
        Ok(())
    }
}

/// Per-axis `max(0, |f| − δ)·sgn(f)`.
pub fn deadzone(f: &Vec3, delta: &Vec3) -> Vec3 {
    Vec3::from_fn(|i, _| (f[i].abs() - delta[i]).max(0.0) * f[i].signum())
}

/// Scales `v` onto the ball of radius `cap`; the result never exceeds it.
pub fn sat_norm<const N: usize>(v: &nalgebra::SVector<f64, N>, cap: f64) -> nalgebra::SVector<f64, N> {
    let n = v.norm();
    if n <= cap {
        return *v;
    }
    let mut out = v * (cap / n);
    while out.norm() > cap {
        out *= 1.0 - f64::EPSILON;
    }
    out
}

#[inline]
pub fn sat(x: f64, cap: f64) -> f64 {
    x.clamp(-cap, cap)
}

/// Forward-Euler admittance update. Returns the new velocity (m/s) and the
/// saturated displacement over the step (mm).
pub fn admittance_step(v_prev: &Vec3, f_tilde: &Vec3, p: &AdmittanceParams) -> (Vec3, Vec3) {
    let acc = Vec3::from_fn(|i, _| (f_tilde[i] - p.b_d[i] * v_prev[i]) / p.m_d[i]);
    let v = v_prev + acc * p.dt;
    let dp = sat_norm(&v, p.v_max) * (p.dt * 1000.0);
    (v, dp)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    LateralDominant,
    DepthDominant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseState {
    pub phase: Phase,
    /// Registered model depth held by the fixture (mm).
    pub z_ref: f64,
    pub settle: usize,
    pub settled: bool,
}

impl PhaseState {
    pub fn new(z_ref: f64) -> Self {
        Self { phase: Phase::LateralDominant, z_ref, settle: 0, settled: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MicroGains {
    pub k_x: Matrix2<f64>,
    pub k_z: [f64; 2],
    pub q_fb: f64,
    pub r_fb: f64,
    /// Axial design weights reproducing `k_z` on the velocity-lag model.
    pub q_z: [f64; 2],
    pub r_z: f64,
    pub lag_tau: f64,
    /// Lateral and axial speed caps (mm/s).
    pub v_x_max: f64,
    pub v_z_max: f64,
    pub delta_z: f64,
    /// Damping of the resolved-rate inverse.
    pub lambda: f64,
    /// Diagonal joint weights; empty means identity.
    pub w_q: Vec<f64>,
    /// Lateral error (mm) below which depth is engaged.
    pub eps_coarse: f64,
    pub hyst_enter: f64,
    pub hyst_exit: f64,
    /// In-focus band for settling (mm).
    pub focal_tol: f64,
    pub settle_count: usize,
    pub dt: f64,
}

impl Default for MicroGains {
    fn default() -> Self {
        let dt = DT;
        let k = lateral_gain(dt, 1600.0, 1.0).expect("default lateral design is stabilizable");
        Self {
            k_x: k,
            k_z: [9.72, 2.73],
            q_fb: 1600.0,
            r_fb: 1.0,
            q_z: [167.49652967, 14.04256115],
            r_z: 1.0,
            lag_tau: 0.2,
            v_x_max: 10.0,
            v_z_max: 5.0,
            delta_z: 0.03,
            lambda: 0.01,
            w_q: Vec::new(),
            eps_coarse: 0.025,
            hyst_enter: 0.1,
            hyst_exit: 0.2,
            focal_tol: 0.03,
            settle_count: 3,
            dt,
        }
    }
}

impl MicroGains {
    pub fn validate(&self) -> Result<()> {
        for v in [self.v_x_max, self.v_z_max, self.delta_z, self.eps_coarse, self.focal_tol, self.dt] {
            if !(v > 0.0) {
                return Err(Error::Config("micro caps, thresholds and dt must be positive".into()));
            }
        }
        if !(self.lambda >= 0.0) || self.w_q.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::Config("damping must be >= 0 and joint weights > 0".into()));
        }
        if !(self.hyst_enter >= 0.0 && self.hyst_enter < 1.0 && self.hyst_exit >= 0.0) {
            return Err(Error::Config("hysteresis margins out of range".into()));
        }
        Ok(())
    }

    pub fn w_q_matrix(&self, n: usize) -> DMatrix<f64> {
        if self.w_q.is_empty() {
            DMatrix::identity(n, n)
        } else {
            DMatrix::from_diagonal(&DVector::from_row_slice(&self.w_q))
        }
    }
}

/// Lateral LQR gain on `(A = I₂, B = dt·I₂)`.
pub fn lateral_gain(dt: f64, q_fb: f64, r_fb: f64) -> Result<Matrix2<f64>> {
    let a = DMatrix::identity(2, 2);
    let b = DMatrix::identity(2, 2) * dt;
    let (_, k) = dare_gain(&a, &b, &(DMatrix::identity(2, 2) * q_fb), &(DMatrix::identity(2, 2) * r_fb))?;
    Ok(Matrix2::new(k[(0, 0)], k[(0, 1)], k[(1, 0)], k[(1, 1)]))
}

/// Velocity-lag design model `x = (e_z, ė_z)`, `ė` following the command
/// with time constant `tau`.
pub fn axial_design_model(dt: f64, tau: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let a = (-dt / tau).exp();
    (DMatrix::from_row_slice(2, 2, &[1.0, dt, 0.0, a]), DMatrix::from_row_slice(2, 1, &[0.0, 1.0 - a]))
}

/// Axial gain from the design weights.
pub fn axial_gain(dt: f64, tau: f64, q_z: [f64; 2], r_z: f64) -> Result<[f64; 2]> {
    let (a, b) = axial_design_model(dt, tau);
    let q = DMatrix::from_diagonal(&DVector::from_row_slice(&q_z));
    let (_, k) = dare_gain(&a, &b, &q, &DMatrix::from_element(1, 1, r_z))?;
    Ok([k[(0, 0)], k[(0, 1)]])
}

/// Inputs of one micro step. Errors are `current − desired`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MicroInput {
    /// Lifted lateral error in the camera plane (mm).
    pub e_lat: Vec2,
    /// Live axial estimate `(e_z, ė_z)`.
    pub e_z: [f64; 2],
    /// Model depth from kinematics and the calibrated rotation (mm).
    pub z_model: f64,
    pub z_model_rate: f64,
    pub vis: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MicroOutput {
    /// Camera-plane velocity (mm/s).
    pub u_x: Vec2,
    /// Axial velocity (mm/s).
    pub u_z: f64,
    pub phase: PhaseState,
    pub switched: bool,
}

/// Phase-gated micro law with a registered-depth fixture.
pub fn micro_step(input: &MicroInput, phase: &PhaseState, gains: &MicroGains) -> MicroOutput {
    let mut ph = *phase;
    if !input.vis {
        return MicroOutput { u_x: Vec2::zeros(), u_z: 0.0, phase: ph, switched: false };
    }
    let lat = input.e_lat.norm();
    let before = ph.phase;
    match ph.phase {
        Phase::LateralDominant if lat < gains.eps_coarse * (1.0 - gains.hyst_enter) => {
            ph.phase = Phase::DepthDominant;
            ph.settle = 0;
            ph.settled = false;
        }
        Phase::DepthDominant if lat > gains.eps_coarse * (1.0 + gains.hyst_exit) => {
            ph.phase = Phase::LateralDominant;
            ph.z_ref = input.z_model;
            ph.settle = 0;
            ph.settled = false;
        }
        _ => {}
    }
    let (u_x, u_z) = match ph.phase {
        Phase::LateralDominant => {
            let u = sat_norm(&(-(gains.k_x * input.e_lat)), gains.v_x_max);
            let ez = input.z_model - ph.z_ref;
            let uz = -(gains.k_z[0] * ez + gains.k_z[1] * input.z_model_rate);
            (u, sat(uz, gains.v_z_max))
        }
        Phase::DepthDominant => {
            let uz = -(gains.k_z[0] * input.e_z[0] + gains.k_z[1] * input.e_z[1]);
            if input.e_z[0].abs() <= gains.focal_tol {
                ph.settle += 1;
            } else {
                ph.settle = 0;
            }
            ph.settled = ph.settle >= gains.settle_count;
            (Vec2::zeros(), sat(uz, gains.v_z_max))
        }
    };
    MicroOutput { u_x, u_z, phase: ph, switched: ph.phase != before }
}

/// `q̇ = q̇_macro + J_p^{†λ} u_micro`.
pub fn fuse_commands(qdot_macro: &DVector<f64>, u_micro: &Vec3, jp: &DMatrix<f64>, gains: &MicroGains) -> Result<DVector<f64>> {
    let n = jp.ncols();
    if qdot_macro.len() != n {
        return Err(Error::Domain("macro command length differs from joint count".into()));
    }
    let pinv = damped_pinv(jp, &gains.w_q_matrix(n), gains.lambda)?;
    Ok(qdot_macro + pinv * DVector::from_row_slice(u_micro.as_slice()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deadzone_example() {
        let f = deadzone(&Vec3::new(0.5, -2.0, 0.0), &Vec3::new(1.0, 1.0, 1.0));
        assert_eq!(f, Vec3::new(0.0, -1.0, 0.0));
    }

    #[test]
    fn admittance_reference_step() {
        let (v, dp) = admittance_step(&Vec3::zeros(), &Vec3::new(12.0, 0.0, 0.0), &AdmittanceParams::default());
        assert!((v.x - 0.3996).abs() < 1e-12);
        assert!((dp.x - 0.333).abs() < 1e-12);
    }

    #[test]
    fn design_weights_reproduce_axial_gain() {
        let g = MicroGains::default();
        let k = axial_gain(g.dt, g.lag_tau, g.q_z, g.r_z).unwrap();
        assert!((k[0] - 9.72).abs() < 5e-3 && (k[1] - 2.73).abs() < 5e-3, "{k:?}");
    }

    #[test]
    fn invisible_means_no_motion() {
        let g = MicroGains::default();
        let inp = MicroInput { e_lat: Vec2::new(1.0, 1.0), e_z: [1.0, 0.0], vis: false, ..Default::default() };
        let out = micro_step(&inp, &PhaseState::new(0.0), &g);
        assert_eq!(out.u_x, Vec2::zeros());
        assert_eq!(out.u_z, 0.0);
    }

    #[test]
    fn axial_saturation() {
        let g = MicroGains::default();
        let inp = MicroInput { e_z: [-20.0 / 9.72, 0.0], vis: true, ..Default::default() };
        let out = micro_step(&inp, &PhaseState::new(0.0), &g);
        assert_eq!(out.phase.phase, Phase::DepthDominant);
        assert_eq!(out.u_z, 5.0);
    }
}
