use serde::{Deserialize, Serialize};

use super::{
    conformal_calibrate, fuse_depth_crops, gated_update_axial, gated_update_planar, predict_with_input,
    watchdog, FilterConfig, FilterState, GateDiag, GateParams, WatchdogEvent,
};
use crate::error::{Error, Result};
use crate::geometry::Vec2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerConfig {
    pub gate: GateParams,
    pub filter: FilterConfig,
    pub dt: f64,
    pub watchdog: bool,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self { gate: GateParams::default(), filter: FilterConfig::default(), dt: 1.0 / 30.0, watchdog: true }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        self.gate.validate()?;
        self.filter.validate()?;
        if !(self.dt > 0.0) {
            return Err(Error::Config("dt must be > 0".into()));
        }
        Ok(())
    }
}

/// One frame of tracker input. Shifts are the predicted displacement of the
/// error caused by the previous command.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrackInput {
    pub pixel: Option<Vec2>,
    pub conf: f64,
    pub depth_crops: Option<Vec<f64>>,
    pub shift_px: Vec2,
    pub shift_z: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub t: f64,
    pub e_x: [f64; 4],
    pub e_z: [f64; 2],
    /// Planar covariance trace after prediction, before any reset.
    pub trace_prior_x: f64,
    pub trace_x: f64,
    pub trace_z: f64,
    pub init_x: bool,
    pub init_z: bool,
    pub visible: bool,
    pub gate_x: GateDiag,
    pub gate_z: GateDiag,
    pub reset: WatchdogEvent,
}

/// Streaming planar + axial tip tracker.
#[derive(Debug, Clone)]
pub struct Tracker {
    pub config: TrackerConfig,
    pub state: FilterState,
    target: Vec2,
}

impl Tracker {
    pub fn new(config: TrackerConfig, target: Vec2) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, state: FilterState::default(), target })
    }

    pub fn target(&self) -> Vec2 {
        self.target
    }

    /// Moves the reference pixel; the planar error is re-expressed.
    pub fn set_target(&mut self, target: Vec2) {
        if self.state.init_x {
            let d = self.target - target;
            self.state.x[0] += d.x;
            self.state.x[1] += d.y;
        }
        self.target = target;
    }

    /// Installs a split-conformal quantile from held-out scores.
    pub fn calibrate_gate(&mut self, scores: &[f64]) -> Result<f64> {
        let q = conformal_calibrate(scores, self.config.gate.level)?;
        if !(q > 0.0) {
            return Err(Error::Domain("calibrated quantile must be > 0".into()));
        }
        self.config.gate.q = q;
        Ok(q)
    }

    pub fn feed(&mut self, input: &TrackInput) -> Snapshot {
        let c = &self.config;
        let mut s = predict_with_input(&self.state, c.dt, c.filter.q0x, c.filter.q0z, input.shift_px, input.shift_z);
        let trace_prior_x = if s.init_x { s.px.trace() } else { 0.0 };
        let mut reset = WatchdogEvent::default();
        if c.watchdog {
            (s, reset) = watchdog(&s, &c.gate, c.dt);
        }
        let mut gate_x = GateDiag::default();
        let mut visible = false;
        if let Some(p) = input.pixel {
            if input.conf >= c.gate.tau_loss {
                (s, gate_x) = gated_update_planar(&s, p, self.target, input.conf, &c.gate, &c.filter);
                visible = s.init_x && input.conf >= c.gate.tau_det;
            }
        }
        let mut gate_z = GateDiag::default();
        if let Some(crops) = &input.depth_crops {
            if let Ok(f) = fuse_depth_crops(crops, &c.gate) {
                (s, gate_z) = gated_update_axial(&s, &f, &c.gate, &c.filter);
            }
        }
        self.state = s;
        Snapshot {
            t: s.t,
            e_x: [s.x[0], s.x[1], s.x[2], s.x[3]],
            e_z: [s.z[0], s.z[1]],
            trace_prior_x,
            trace_x: if s.init_x { s.px.trace() } else { 0.0 },
            trace_z: if s.init_z { s.pz.trace() } else { 0.0 },
            init_x: s.init_x,
            init_z: s.init_z,
            visible,
            gate_x,
            gate_z,
            reset,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permanent_dropout_resets_after_n_max() {
        let cfg = TrackerConfig::default();
        let n = cfg.gate.n_max(cfg.dt);
        let mut t = Tracker::new(cfg, Vec2::zeros()).unwrap();
        let snap = t.feed(&TrackInput { pixel: Some(Vec2::new(1.0, 1.0)), conf: 0.9, ..Default::default() });
        assert!(snap.init_x);
        for k in 1..=n {
            let s = t.feed(&TrackInput::default());
            assert_eq!(s.reset.reset_x, k == n, "step {k}");
        }
    }

    #[test]
    fn target_change_shifts_error() {
        let mut t = Tracker::new(TrackerConfig::default(), Vec2::zeros()).unwrap();
        t.feed(&TrackInput { pixel: Some(Vec2::new(5.0, 0.0)), conf: 0.9, ..Default::default() });
        t.set_target(Vec2::new(5.0, 0.0));
        assert!(t.state.planar_pos().norm() < 1e-12);
    }
}
