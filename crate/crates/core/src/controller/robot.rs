use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::geometry::{rot_z, Mat3, Pose3, Vec3};

/// Kinematic robot with joint-rate control.
pub trait Robot {
    fn dof(&self) -> usize;
    fn pose(&self, q: &[f64]) -> Pose3;
    /// Positional Jacobian (mm per joint unit).
    fn jacobian_p(&self, q: &[f64]) -> DMatrix<f64>;
    /// Stacked positional and angular Jacobian.
    fn jacobian(&self, q: &[f64]) -> DMatrix<f64>;

    fn rotation(&self, q: &[f64]) -> Mat3 {
        self.pose(q).rotation
    }
}

/// Cartesian gantry: joints are x, y, z in mm.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Gantry3;

impl Robot for Gantry3 {
    fn dof(&self) -> usize {
        3
    }

    fn pose(&self, q: &[f64]) -> Pose3 {
        Pose3::from_translation(Vec3::new(q[0], q[1], q[2]))
    }

    fn jacobian_p(&self, _q: &[f64]) -> DMatrix<f64> {
        DMatrix::identity(3, 3)
    }

    fn jacobian(&self, _q: &[f64]) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(6, 3);
        j.view_mut((0, 0), (3, 3)).fill_with_identity();
        j
    }
}

/// Three revolute joints in the horizontal plane plus a vertical prismatic
/// joint; redundant for position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanarArm4 {
    pub links: [f64; 3],
}

impl Default for PlanarArm4 {
    fn default() -> Self {
        Self { links: [100.0, 80.0, 40.0] }
    }
}

impl Robot for PlanarArm4 {
    fn dof(&self) -> usize {
        4
    }

    fn pose(&self, q: &[f64]) -> Pose3 {
        let (mut x, mut y, mut a) = (0.0, 0.0, 0.0);
        for i in 0..3 {
            a += q[i];
            x += self.links[i] * a.cos();
            y += self.links[i] * a.sin();
        }
        Pose3 { rotation: rot_z(a), translation: Vec3::new(x, y, q[3]) }
    }

    fn jacobian_p(&self, q: &[f64]) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(3, 4);
        let mut cum = [0.0; 3];
        let mut a = 0.0;
        for i in 0..3 {
            a += q[i];
            cum[i] = a;
        }
        for col in 0..3 {
            for i in col..3 {
                j[(0, col)] -= self.links[i] * cum[i].sin();
                j[(1, col)] += self.links[i] * cum[i].cos();
            }
        }
        j[(2, 3)] = 1.0;
        j
    }

    fn jacobian(&self, q: &[f64]) -> DMatrix<f64> {
        let jp = self.jacobian_p(q);
        let mut j = DMatrix::zeros(6, 4);
        j.view_mut((0, 0), (3, 4)).copy_from(&jp);
        for col in 0..3 {
            j[(5, col)] = 1.0;
        }
        j
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arm_jacobian_matches_finite_differences() {
        let arm = PlanarArm4::default();
        let q = [0.3, -0.7, 0.4, 5.0];
        let j = arm.jacobian_p(&q);
        for c in 0..4 {
            let mut a = q;
            let mut b = q;
            a[c] += 1e-6;
            b[c] -= 1e-6;
            let d = (arm.pose(&a).translation - arm.pose(&b).translation) / 2e-6;
            for r in 0..3 {
                assert!((j[(r, c)] - d[r]).abs() < 1e-5);
            }
        }
    }
}
