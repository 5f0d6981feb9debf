//! Sharpness-gradient depth search used as the depth-regulation baseline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HillClimbParams {
    pub rho: f64,
    pub rho_min: f64,
    pub rho_max: f64,
    /// Step per unit sharpness gradient (mm² per unit).
    pub gamma: f64,
    /// Pull towards the prior depth.
    pub lambda: f64,
    /// Finite-difference half-width (mm).
    pub probe: f64,
    /// Largest move per iteration (mm).
    pub max_step: f64,
    /// Regional-average sharpness at which the search stops.
    pub stop_target: f64,
}

impl Default for HillClimbParams {
    fn default() -> Self {
        Self {
            rho: 1.0,
            rho_min: 0.25,
            rho_max: 2.0,
            gamma: 1.0,
            lambda: 0.005,
            probe: 0.05,
            max_step: 5.0 * super::DT,
            stop_target: 0.999,
        }
    }
}

impl HillClimbParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho_min > 0.0 && self.rho_min <= self.rho_max) {
            return Err(Error::Config("need 0 < rho_min <= rho_max".into()));
        }
        if !(self.gamma > 0.0 && self.probe > 0.0 && self.max_step > 0.0 && self.lambda >= 0.0) {
            return Err(Error::Config("hill-climb step parameters must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HillStep {
    pub z: f64,
    pub gradient: f64,
    pub regional: f64,
    pub stop: bool,
}

/// One update `z⁺ = z + ρ·γ·(g − 2λ(z − z_prior))`, with `g` a central
/// difference of sharpness and the move capped at `max_step`.
pub fn hillclimb_depth_step(
    z: f64,
    sharpness: &mut dyn FnMut(f64) -> f64,
    z_prior: f64,
    params: &HillClimbParams,
) -> HillStep {
    let h = params.probe;
    let (sm, s0, sp) = (sharpness(z - h), sharpness(z), sharpness(z + h));
    let regional = (sm + s0 + sp) / 3.0;
    let g = (sp - sm) / (2.0 * h);
    if regional >= params.stop_target {
        return HillStep { z, gradient: g, regional, stop: true };
    }
    let rho = params.rho.clamp(params.rho_min, params.rho_max);
    let dz = (rho * params.gamma * (g - 2.0 * params.lambda * (z - z_prior))).clamp(-params.max_step, params.max_step);
    HillStep { z: z + dz, gradient: g, regional, stop: false }
}

/// Trust-region rate adaptation after a move.
pub fn adapt_rate(rho: f64, improved: bool, params: &HillClimbParams) -> f64 {
    if improved {
        (rho * 1.5).min(params.rho_max)
    } else {
        (rho * 0.5).max(params.rho_min)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stationary_at_peak_with_matching_prior() {
        let p = HillClimbParams { stop_target: 2.0, ..Default::default() };
        let mut f = |z: f64| (-z * z).exp();
        let s = hillclimb_depth_step(0.0, &mut f, 0.0, &p);
        assert_eq!(s.z, 0.0);
    }

    #[test]
    fn plateau_follows_prior() {
        let p = HillClimbParams { stop_target: 2.0, ..Default::default() };
        let mut flat = |_: f64| 0.05;
        assert!(hillclimb_depth_step(4.0, &mut flat, 1.0, &p).z < 4.0);
        assert!(hillclimb_depth_step(-4.0, &mut flat, 1.0, &p).z > -4.0);
    }
}
