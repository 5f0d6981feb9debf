//! Projected shared controller: admittance plus an image-space servo term,
//! with its energy-like monitor.

use nalgebra::{Matrix2, Matrix3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraModel, Mat3, Vec2, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LegacyParams {
    pub lambda_t: f64,
    pub b: [f64; 3],
    pub m: [f64; 3],
    pub mu_se: f64,
    /// Diagonal of the observation-plane projection.
    pub projection: [f64; 3],
    pub dt: f64,
}

impl Default for LegacyParams {
    fn default() -> Self {
        Self { lambda_t: 100.0, b: [0.7; 3], m: [0.1; 3], mu_se: 1.0, projection: [1.0, 1.0, 0.0], dt: 0.01 }
    }
}

impl LegacyParams {
    pub fn validate(&self) -> Result<()> {
        if self.b.iter().chain(&self.m).any(|&v| !(v > 0.0)) || !(self.dt > 0.0) {
            return Err(Error::Config("legacy mass, damping and dt must be positive".into()));
        }
        if !(self.lambda_t >= 0.0) || !(self.mu_se >= 0.0) {
            return Err(Error::Config("legacy gains must be non-negative".into()));
        }
        Ok(())
    }

    /// Lyapunov weight `k_e = λ_t²·dt`.
    pub fn k_e(&self) -> f64 {
        self.lambda_t * self.lambda_t * self.dt
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LegacyState {
    pub x: Vec3,
    pub xdot: Vec3,
}

/// `(J_img R̂, (J_img R̂ (J_img R̂)ᵀ)⁻¹)`.
fn servo_matrices(r_hat: &Mat3, cam: &CameraModel) -> Result<(nalgebra::Matrix2x3<f64>, Matrix2<f64>)> {
    let a = cam.l_img() * r_hat;
    let mrt = a * a.transpose();
    let det = mrt.determinant();
    if !(det.abs() > 1e-12 * mrt.norm_squared().max(1e-300)) {
        return Err(Error::RankDeficient("J_img·R̂ lost row rank".into()));
    }
    let inv = mrt.try_inverse().ok_or(Error::RankDeficient("J_img·R̂ lost row rank".into()))?;
    Ok((a, inv))
}

/// Commanded acceleration for one step. The servo and damping terms are
/// evaluated at the step midpoint, with the error propagated through the
/// model `ė = −J_img R̂ ẋ`, so the monitor decreases in the disturbance-free
/// case.
pub fn legacy_shared_step(
    state: &LegacyState,
    f_ext: &Vec3,
    e_img: &Vec2,
    r_hat: &Mat3,
    cam: &CameraModel,
    params: &LegacyParams,
) -> Result<Vec3> {
    let (a, mrt_inv) = servo_matrices(r_hat, cam)?;
    let apinv = a.transpose() * mrt_inv;
    let p = Matrix3::from_diagonal(&Vec3::from(params.projection));
    let m = Matrix3::from_diagonal(&Vec3::from(params.m));
    let b = Matrix3::from_diagonal(&Vec3::from(params.b));
    let h = params.dt / 2.0;
    let v = state.xdot;
    let lhs = m + b * (params.mu_se * h) + p * apinv * a * (params.lambda_t * h * h);
    let rhs = (f_ext - b * v) * params.mu_se + p * apinv * (e_img - a * v * h) * params.lambda_t;
    lhs.lu().solve(&rhs).ok_or(Error::Singular("legacy step matrix"))
}

/// Integrates one step with the midpoint velocity.
pub fn legacy_integrate(state: &LegacyState, acc: &Vec3, dt: f64) -> LegacyState {
    let v1 = state.xdot + acc * dt;
    LegacyState { x: state.x + (state.xdot + v1) * (dt / 2.0), xdot: v1 }
}

/// `V = ½ẋᵀMẋ + ½k_e eᵀ M_RT⁻¹ e`.
pub fn legacy_lyapunov(state: &LegacyState, e_img: &Vec2, r_hat: &Mat3, cam: &CameraModel, params: &LegacyParams) -> Result<f64> {
    let (_, mrt_inv) = servo_matrices(r_hat, cam)?;
    let m = Matrix3::from_diagonal(&Vec3::from(params.m));
    let kin = 0.5 * (state.xdot.transpose() * m * state.xdot)[0];
    let pot = 0.5 * params.k_e() * (e_img.transpose() * mrt_inv * e_img)[0];
    Ok(kin + pot)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equilibrium_gives_zero_acceleration() {
        let a = legacy_shared_step(
            &LegacyState::default(),
            &Vec3::zeros(),
            &Vec2::zeros(),
            &Mat3::identity(),
            &CameraModel::default(),
            &LegacyParams::default(),
        )
        .unwrap();
        assert_eq!(a, Vec3::zeros());
    }

    #[test]
    fn rank_loss_detected() {
        let r = crate::geometry::rot_y(std::f64::consts::FRAC_PI_2);
        let mut cam = CameraModel::default();
        cam.scale = 1.0;
        let flat = Mat3::new(1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert!(legacy_shared_step(&LegacyState::default(), &Vec3::zeros(), &Vec2::zeros(), &flat, &cam, &LegacyParams::default()).is_err());
        assert!(legacy_shared_step(&LegacyState::default(), &Vec3::zeros(), &Vec2::zeros(), &r, &cam, &LegacyParams::default()).is_ok());
    }
}
