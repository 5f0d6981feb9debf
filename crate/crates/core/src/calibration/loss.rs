use crate::error::{Error, Result};
use crate::geometry::{rot_interaction, CameraModel, Mat3, Vec2, Vec3};
use crate::scenario::WarmupLog;

/// `r²/2` inside `κ`, `κ(|r| − κ/2)` outside.
#[inline]
pub fn huber(r: f64, kappa: f64) -> f64 {
    let a = r.abs();
    if a <= kappa {
        0.5 * r * r
    } else {
        kappa * (a - 0.5 * kappa)
    }
}

/// Consecutive valid frames, bridging over invalid ones.
#[derive(Debug, Clone, Copy)]
pub struct VelPair {
    pub i: usize,
    pub j: usize,
    pub dq: Vec2,
}

pub fn velocity_pairs(log: &WarmupLog) -> Vec<VelPair> {
    let valid: Vec<usize> = (0..log.frames.len()).filter(|&i| log.frames[i].valid).collect();
    valid
        .windows(2)
        .map(|w| {
            let a = log.frames[w[0]].pixel_obs.unwrap();
            let b = log.frames[w[1]].pixel_obs.unwrap();
            VelPair { i: w[0], j: w[1], dq: b - a }
        })
        .collect()
}

/// Huber-summed velocity residual for pre-extracted pairs and tip points.
pub fn velocity_loss_pairs(
    pairs: &[VelPair],
    tips: &[Vec3],
    r: &Mat3,
    t_vec: &Vec3,
    cam: &CameraModel,
    delta_phi: &Vec3,
    kappa: f64,
) -> f64 {
    let s = cam.scale;
    let use_phi = delta_phi.norm_squared() > 0.0;
    let mut acc = 0.0;
    for p in pairs {
        let dp = r * (tips[p.j] - tips[p.i]);
        let mut pred = Vec2::new(s * dp.x, s * dp.y);
        if use_phi {
            let pc = r * tips[p.i] + t_vec;
            pred += rot_interaction(cam, &pc) * delta_phi;
        }
        let res = p.dq - pred;
        acc += huber(res.x, kappa) + huber(res.y, kappa);
    }
    acc
}

/// Velocity-consistency loss of a warm-up log under rotation `r`.
pub fn velocity_loss(
    log: &WarmupLog,
    r: &Mat3,
    t_vec: &Vec3,
    cam: &CameraModel,
    delta_phi: &Vec3,
    kappa: f64,
) -> Result<f64> {
    if !(kappa > 0.0) {
        return Err(Error::Domain("Huber scale must be > 0".into()));
    }
    let pairs = velocity_pairs(log);
    if pairs.is_empty() {
        return Err(Error::Empty("valid velocity pairs"));
    }
    let tips: Vec<Vec3> = log.frames.iter().map(|f| f.tip3d).collect();
    Ok(velocity_loss_pairs(&pairs, &tips, r, t_vec, cam, delta_phi, kappa))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn huber_branches() {
        let k = 0.12;
        assert!((huber(k / 2.0, k) - k * k / 8.0).abs() < 1e-15);
        assert!((huber(-2.0 * k, k) - 1.5 * k * k).abs() < 1e-15);
        assert!((huber(k, k) - k * k / 2.0).abs() < 1e-15);
    }
}
