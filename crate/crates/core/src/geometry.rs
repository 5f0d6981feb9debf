//! Rigid-body and camera math: rotations, tip kinematics, projection
//! models, interaction matrices and the damped resolved-rate inverse.

use nalgebra::{DMatrix, Matrix2x3, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};

pub type Vec2 = Vector2<f64>;
pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Mat23 = Matrix2x3<f64>;

/// Default exclusion margin around the pitch singularity (rad).
pub const SINGULARITY_MARGIN: f64 = 0.1;

/// Image scale implied by the 9.164 µm pixel pitch.
pub const DEFAULT_SCALE_PX_PER_MM: f64 = 1.0 / 0.009164;

const ORTHO_TOL: f64 = 1e-9;

/// Rigid transform with millimetre translation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose3 {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Pose3 {
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        check_rotation(&rotation)?;
        if !translation.iter().all(|v| v.is_finite()) {
            return domain("pose translation is not finite");
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self { rotation: Mat3::identity(), translation: Vec3::zeros() }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self { rotation: Mat3::identity(), translation: t }
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Row-major 3x4 `[R | t]`.
    pub fn to_row_major(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 4 + c] = self.rotation[(r, c)];
            }
            out[r * 4 + 3] = self.translation[r];
        }
        out
    }

    pub fn from_row_major(v: &[f64]) -> Result<Self> {
        if v.len() != 12 {
            return Err(Error::Parse(format!("pose needs 12 values, got {}", v.len())));
        }
        let rot = Mat3::from_fn(|r, c| v[r * 4 + c]);
        let t = Vec3::new(v[3], v[7], v[11]);
        Self::new(rot, t)
    }
}

/// Validates orthonormality and a positive determinant.
pub fn check_rotation(r: &Mat3) -> Result<()> {
    if !r.iter().all(|v| v.is_finite()) {
        return domain("rotation has non-finite entries");
    }
    let dev = (r.transpose() * r - Mat3::identity()).abs().max();
    if dev > ORTHO_TOL {
        return domain(format!("rotation not orthonormal (max |RtR - I| = {dev:e})"));
    }
    let det = r.determinant();
    if (det - 1.0).abs() > ORTHO_TOL {
        return domain(format!("rotation determinant {det} != 1"));
    }
    Ok(())
}

/// Bounded ZYX Euler triple, angles in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EulerZYX {
    pub theta_x: f64,
    pub theta_y: f64,
    pub theta_z: f64,
    pub lower: [f64; 3],
    pub upper: [f64; 3],
}

impl EulerZYX {
    pub fn default_bounds() -> ([f64; 3], [f64; 3]) {
        let py = std::f64::consts::FRAC_PI_2 - SINGULARITY_MARGIN;
        let pi = std::f64::consts::PI;
        ([-pi, -py, -pi], [pi, py, pi])
    }

    /// Angles with the default box (full yaw/roll, pitch clear of the singularity).
    pub fn new(theta_x: f64, theta_y: f64, theta_z: f64) -> Self {
        let (lower, upper) = Self::default_bounds();
        Self { theta_x, theta_y, theta_z, lower, upper }
    }

    pub fn with_bounds(mut self, lower: [f64; 3], upper: [f64; 3]) -> Self {
        self.lower = lower;
        self.upper = upper;
        self
    }

    pub fn angles(&self) -> [f64; 3] {
        [self.theta_x, self.theta_y, self.theta_z]
    }

    pub fn check(&self) -> Result<()> {
        let a = self.angles();
        let py = std::f64::consts::FRAC_PI_2 - SINGULARITY_MARGIN;
        if self.theta_y.abs() >= py + 1e-12 {
            return domain(format!("theta_y = {} inside singularity margin", self.theta_y));
        }
        for i in 0..3 {
            if !a[i].is_finite() || a[i] < self.lower[i] || a[i] > self.upper[i] {
                return domain(format!(
                    "angle {i} = {} outside [{}, {}]",
                    a[i], self.lower[i], self.upper[i]
                ));
            }
        }
        Ok(())
    }
}

pub fn rot_x(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_z(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// `R = Rz(θz) Ry(θy) Rx(θx)`; rejects out-of-bounds angles.
pub fn euler_to_rotation(e: &EulerZYX) -> Result<Mat3> {
    e.check()?;
    Ok(euler_matrix(e.theta_x, e.theta_y, e.theta_z))
}

/// Unchecked composition, for optimizer internals that already clamp.
pub fn euler_matrix(x: f64, y: f64, z: f64) -> Mat3 {
    rot_z(z) * rot_y(y) * rot_x(x)
}

/// Inverse of [`euler_to_rotation`] away from the pitch singularity.
pub fn rotation_to_euler(r: &Mat3) -> EulerZYX {
    let sy = (-r[(2, 0)]).clamp(-1.0, 1.0);
    let y = sy.asin();
    let x = r[(2, 1)].atan2(r[(2, 2)]);
    let z = r[(1, 0)].atan2(r[(0, 0)]);
    EulerZYX::new(x, y, z)
}

pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues exponential of a rotation vector.
pub fn so3_exp(phi: &Vec3) -> Mat3 {
    let th = phi.norm();
    let k = skew(phi);
    if th < 1e-8 {
        return Mat3::identity() + k + 0.5 * k * k;
    }
    Mat3::identity() + (th.sin() / th) * k + ((1.0 - th.cos()) / (th * th)) * k * k
}

/// Rotation vector of `r` (principal branch).
pub fn so3_log(r: &Mat3) -> Vec3 {
    let w = Vec3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    let sin2 = w.norm();
    let cos = (r.trace() - 1.0) * 0.5;
    let th = (0.5 * sin2).atan2(cos);
    if th < 1e-8 {
        return 0.5 * w;
    }
    if cos < -0.99 {
        // near pi: axis from the symmetric part, sign from the skew part
        let b = (r + r.transpose()) * 0.5 - Mat3::identity() * cos;
        let mut i = 0;
        for k in 1..3 {
            if b[(k, k)] > b[(i, i)] {
                i = k;
            }
        }
        let mut axis = b.column(i).into_owned();
        axis /= axis.norm();
        if axis.dot(&w) < 0.0 {
            axis = -axis;
        }
        return axis * th;
    }
    w * (th / sin2)
}

/// Geodesic angle between two rotations (rad).
pub fn geodesic_angle(a: &Mat3, b: &Mat3) -> f64 {
    let c = (((a.transpose() * b).trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    c.acos()
}

/// Nearest rotation in the Frobenius sense.
pub fn project_to_so3(m: &Mat3) -> Mat3 {
    let svd = m.svd(true, true);
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let mut d = Mat3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    u * d * vt
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Perspective {
    /// Focal length in pixels.
    pub focal: f64,
    /// Fixed plane depth (mm).
    pub plane_z: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub scale: f64,
    pub principal: [f64; 2],
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub perspective: Option<Perspective>,
}

impl Default for CameraModel {
    fn default() -> Self {
        Self {
            scale: DEFAULT_SCALE_PX_PER_MM,
            principal: [320.0, 240.0],
            width: 640,
            height: 480,
            perspective: None,
        }
    }
}

impl CameraModel {
    pub fn new(scale: f64, principal: [f64; 2], width: u32, height: u32) -> Result<Self> {
        let cam = Self { scale, principal, width, height, perspective: None };
        cam.validate()?;
        Ok(cam)
    }

    /// Attaches the perspective variant; requires `focal / plane_z == scale`.
    pub fn with_perspective(mut self, focal: f64, plane_z: f64) -> Result<Self> {
        self.perspective = Some(Perspective { focal, plane_z });
        self.validate()?;
        Ok(self)
    }

    /// Camera whose weak scale is derived from a focal length and plane depth.
    pub fn from_perspective(
        focal: f64,
        plane_z: f64,
        principal: [f64; 2],
        width: u32,
        height: u32,
    ) -> Result<Self> {
        if plane_z <= 0.0 {
            return Err(Error::Config("plane depth must be positive".into()));
        }
        Self::new(focal / plane_z, principal, width, height)?.with_perspective(focal, plane_z)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Config(format!("camera scale {} must be > 0", self.scale)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("image size must be non-zero".into()));
        }
        if let Some(p) = self.perspective {
            if !(p.plane_z > 0.0) {
                return Err(Error::Config("plane depth must be positive".into()));
            }
            let s = p.focal / p.plane_z;
            if (s - self.scale).abs() > 1e-9 * self.scale.max(1.0) {
                return Err(Error::Config(format!(
                    "focal/plane_z = {s} disagrees with weak scale {}",
                    self.scale
                )));
            }
        }
        Ok(())
    }

    pub fn c(&self) -> Vec2 {
        Vec2::new(self.principal[0], self.principal[1])
    }

    /// `L_img = s [I2 0]`.
    pub fn l_img(&self) -> Mat23 {
        Mat23::new(self.scale, 0.0, 0.0, 0.0, self.scale, 0.0)
    }

    pub fn contains(&self, p: &Vec2) -> bool {
        p.x >= 0.0 && p.y >= 0.0 && p.x <= (self.width - 1) as f64 && p.y <= (self.height - 1) as f64
    }
}

/// Tool-tip offset in the end-effector frame (mm).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToolOffset {
    pub r_tip: Vec3,
}

impl ToolOffset {
    pub fn new(r_tip: Vec3, max_len: f64) -> Result<Self> {
        if !r_tip.iter().all(|v| v.is_finite()) {
            return domain("tool offset not finite");
        }
        if r_tip.norm() > max_len {
            return domain(format!("tool offset {} mm exceeds bound {max_len} mm", r_tip.norm()));
        }
        Ok(Self { r_tip })
    }

    pub fn zero() -> Self {
        Self { r_tip: Vec3::zeros() }
    }
}

/// `p3d = R_ee r_tip + t_ee`.
pub fn tip_world(pose_ee: &Pose3, tool: &ToolOffset) -> Vec3 {
    pose_ee.rotation * tool.r_tip + pose_ee.translation
}

/// Camera-frame point `R p + t`.
#[inline]
pub fn to_camera(r: &Mat3, t_vec: &Vec3, p3d: &Vec3) -> Vec3 {
    r * p3d + t_vec
}

/// Weak-perspective projection `c + L_img (R p + t)`.
#[inline]
pub fn project_weak(cam: &CameraModel, r: &Mat3, t_vec: &Vec3, p3d: &Vec3) -> Vec2 {
    let pc = to_camera(r, t_vec, p3d);
    Vec2::new(cam.principal[0] + cam.scale * pc.x, cam.principal[1] + cam.scale * pc.y)
}

/// Fixed-plane perspective projection with intrinsic diagonal `f / z_plane`.
pub fn project_perspective(cam: &CameraModel, r: &Mat3, t_vec: &Vec3, p3d: &Vec3) -> Result<Vec2> {
    let p = cam
        .perspective
        .ok_or_else(|| Error::Config("perspective fields not set".into()))?;
    let k = nalgebra::Matrix3::new(
        p.focal / p.plane_z,
        0.0,
        cam.principal[0],
        0.0,
        p.focal / p.plane_z,
        cam.principal[1],
        0.0,
        0.0,
        1.0,
    );
    let pc = to_camera(r, t_vec, p3d);
    let h = k * Vec3::new(pc.x, pc.y, 1.0);
    Ok(Vec2::new(h.x / h.z, h.y / h.z))
}

/// `(1/z) [[f, 0, -(u-cx)], [0, f, -(v-cy)]]`.
pub fn image_jacobian(cam: &CameraModel, p_obs: &Vec2) -> Result<Mat23> {
    let p = cam
        .perspective
        .ok_or_else(|| Error::Config("perspective fields not set".into()))?;
    let du = p_obs.x - cam.principal[0];
    let dv = p_obs.y - cam.principal[1];
    Ok(Mat23::new(p.focal, 0.0, -du, 0.0, p.focal, -dv) / p.plane_z)
}

/// `L_rot = -s [[0, -z, y], [z, 0, -x]]`.
pub fn rot_interaction(cam: &CameraModel, p_cam: &Vec3) -> Mat23 {
    let s = cam.scale;
    Mat23::new(0.0, s * p_cam.z, -s * p_cam.y, -s * p_cam.z, 0.0, s * p_cam.x)
}

/// `W⁻¹ Jᵀ (J W⁻¹ Jᵀ + λ² I)⁻¹`.
pub fn damped_pinv(j: &DMatrix<f64>, w_q: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    let n = j.ncols();
    if w_q.nrows() != n || w_q.ncols() != n {
        return domain(format!("W_q must be {n}x{n}"));
    }
    if !(lambda >= 0.0) {
        return domain("damping must be non-negative");
    }
    let w_inv = spd_inverse(w_q)?;
    let jw = &w_inv * j.transpose();
    let m = j * &jw + DMatrix::identity(j.nrows(), j.nrows()) * (lambda * lambda);
    if j.nrows() == 0 {
        return Ok(DMatrix::zeros(n, 0));
    }
    let chol = m.cholesky().ok_or(Error::Singular("damped_pinv"))?;
    Ok(jw * chol.inverse())
}

/// Spectral-norm bound `1 / (2 λ sqrt(λmin(W)))` of the damped inverse.
pub fn damped_pinv_bound(w_q: &DMatrix<f64>, lambda: f64) -> Result<f64> {
    let ev = w_q.clone().symmetric_eigen().eigenvalues;
    let lmin = ev.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(lmin > 0.0) {
        return domain("W_q not SPD");
    }
    Ok(1.0 / (2.0 * lambda * lmin.sqrt()))
}

fn spd_inverse(w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (w - w.transpose()).abs().max();
    if sym > 1e-9 * w.abs().max().max(1.0) {
        return domain("W_q not symmetric");
    }
    let chol = w.clone().cholesky().ok_or_else(|| Error::Domain("W_q not SPD".into()))?;
    Ok(chol.inverse())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn euler_identity_and_yaw() {
        let r = euler_to_rotation(&EulerZYX::new(0.0, 0.0, 0.0)).unwrap();
        assert_eq!(r, Mat3::identity());
        let r = euler_to_rotation(&EulerZYX::new(0.0, 0.0, std::f64::consts::FRAC_PI_2)).unwrap();
        let x = r * Vec3::x();
        assert!((x - Vec3::y()).norm() < 1e-15);
    }

    #[test]
    fn euler_rejects_singular_pitch() {
        assert!(euler_to_rotation(&EulerZYX::new(0.0, 1.5, 0.0)).is_err());
        let e = EulerZYX::new(0.3, 0.0, 0.0).with_bounds([-0.1; 3], [0.1; 3]);
        assert!(euler_to_rotation(&e).is_err());
    }

    #[test]
    fn pose_round_trip() {
        let p = Pose3::new(euler_matrix(0.1, -0.2, 0.3), Vec3::new(1.0, 2.0, 3.0)).unwrap();
        let q = Pose3::from_row_major(&p.to_row_major()).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn so3_log_exp() {
        let phi = Vec3::new(0.3, -0.1, 0.7);
        let back = so3_log(&so3_exp(&phi));
        assert!((back - phi).norm() < 1e-12);
        let r = so3_exp(&Vec3::new(0.0, 0.0, 3.14159));
        assert!((so3_exp(&so3_log(&r)) - r).norm() < 1e-9);
    }

    #[test]
    fn perspective_requires_fields() {
        let cam = CameraModel::default();
        assert!(matches!(
            project_perspective(&cam, &Mat3::identity(), &Vec3::zeros(), &Vec3::zeros()),
            Err(Error::Config(_))
        ));
        assert!(cam.with_perspective(15000.0, 40.0).is_err());
    }

    #[test]
    fn damped_pinv_rejects_non_spd() {
        let j = DMatrix::identity(2, 2);
        let w = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(damped_pinv(&j, &w, 0.1).is_err());
    }
}
