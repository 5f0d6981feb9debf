//! Fixed-step closed loop: scripted operator, streaming detector, tracker,
//! macro-micro controller and a kinematic gantry.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::controller::{
    admittance_step, deadzone, fuse_commands, macro_qp, micro_step, sat_norm, AdmittanceParams, Gantry3,
    MacroQPParams, MicroGains, MicroInput, Phase, PhaseState, Robot,
};
use crate::error::{Error, Result};
use crate::estimator::{TrackInput, Tracker, TrackerConfig};
use crate::geometry::{Mat3, Vec2, Vec3};
use crate::scenario::{CorruptionSpec, Rig, RigConfig, StreamObserver};

/// Virtual-hand guidance used while the tip is outside the field of view.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OperatorParams {
    /// Spring stiffness (N/mm).
    pub stiffness: f64,
    /// Damping (N·s/mm).
    pub damping: f64,
    /// Force cap (N).
    pub force_max: f64,
    /// Hold radius (px) and frames for a reach to count.
    pub hold_radius_px: f64,
    pub hold_frames: usize,
    /// Time allowed per target (s).
    pub target_timeout: f64,
    /// Extra wait for depth settling before the next click (s).
    pub settle_timeout: f64,
}

impl Default for OperatorParams {
    fn default() -> Self {
        Self {
            stiffness: 0.5,
            damping: 0.05,
            force_max: 5.0,
            hold_radius_px: 10.0,
            hold_frames: 10,
            target_timeout: 10.0,
            settle_timeout: 3.0,
        }
    }
}

impl OperatorParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.stiffness >= 0.0 && self.damping >= 0.0 && self.force_max > 0.0) {
            return Err(Error::Config("operator gains must be >= 0 and force cap > 0".into()));
        }
        if !(self.hold_radius_px > 0.0 && self.target_timeout > 0.0 && self.settle_timeout >= 0.0) || self.hold_frames == 0 {
            return Err(Error::Config("operator hold and timeouts must be positive".into()));
        }
        Ok(())
    }
}

/// Spring-damper force towards `goal` (mm, robot frame), capped in norm.
pub fn operator_force(tip: &Vec3, vel: &Vec3, goal: &Vec3, p: &OperatorParams) -> Vec3 {
    let f = (goal - tip) * p.stiffness - vel * p.damping;
    sat_norm(&f, p.force_max)
}

/// What the operator asks the tip to do once it is in view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Script {
    /// Click each target (px) in turn, waiting for a hold.
    Reach { targets: Vec<[f64; 2]>, wait_settle: bool },
    /// Follow a target moving on a circle about the principal point.
    Circle { radius_px: f64, rate_deg_s: f64, duration: f64 },
}

/// Everything one closed-loop run needs besides the calibrated rotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub rig: RigConfig,
    pub corruption: CorruptionSpec,
    pub latency_frames: usize,
    pub tracker: TrackerConfig,
    pub gains: MicroGains,
    pub admittance: AdmittanceParams,
    pub qp: MacroQPParams,
    pub operator: OperatorParams,
    /// Start offset of the tip from the focused workspace centre (mm, robot frame).
    pub start_offset: [f64; 3],
    /// Hard stop (s).
    pub max_time: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        let gains = MicroGains::default();
        let tracker = TrackerConfig { dt: gains.dt, ..Default::default() };
        Self {
            rig: RigConfig::default(),
            corruption: closed_loop_corruption(),
            latency_frames: 0,
            tracker,
            admittance: AdmittanceParams { dt: gains.dt, ..Default::default() },
            qp: MacroQPParams { dt: gains.dt, ..Default::default() },
            gains,
            operator: OperatorParams::default(),
            start_offset: [0.0; 3],
            max_time: 120.0,
        }
    }
}

/// Detector model for closed-loop runs: 1 px noise that grows with defocus,
/// 5 µm per-crop depth noise and rare short dropouts.
pub fn closed_loop_corruption() -> CorruptionSpec {
    CorruptionSpec {
        pixel_noise_sigma: 1.0,
        dropout_rate: 0.01,
        dropout_burst_max: 3,
        depth_noise_sigma: 0.005,
        defocus_noise_gain: 1.0,
        ..Default::default()
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        Rig::from_config(self.rig.clone())?;
        self.corruption.validate()?;
        self.tracker.validate()?;
        self.gains.validate()?;
        self.admittance.validate()?;
        self.qp.validate(3)?;
        self.operator.validate()?;
        let dts = [self.tracker.dt, self.admittance.dt, self.qp.dt];
        if dts.iter().any(|&d| (d - self.gains.dt).abs() > 1e-12) {
            return Err(Error::Config("tracker, admittance, QP and micro dt must agree".into()));
        }
        if !(self.max_time > 0.0) {
            return Err(Error::Config("max_time must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StepEvents {
    pub dropout: bool,
    pub reset: bool,
    pub click: bool,
    pub reached: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub k: usize,
    pub t: f64,
    pub tip: [f64; 3],
    pub pixel: [f64; 2],
    pub target: Option<[f64; 2]>,
    pub e_x: [f64; 4],
    pub e_z: [f64; 2],
    /// True signed distance from the focal plane (mm).
    pub e_z_true: f64,
    pub gate_x: f64,
    pub gate_z: f64,
    pub visible: bool,
    pub phase: Phase,
    pub u_x: [f64; 2],
    pub u_z: f64,
    pub qdot: [f64; 3],
    pub force: [f64; 3],
    pub events: StepEvents,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetOutcome {
    pub target: [f64; 2],
    /// Never clicked when the run ended first.
    pub click_t: Option<f64>,
    pub reached: bool,
    /// Entry into the hold ball minus click time (s).
    pub time_to_target: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub success: bool,
    pub reached: usize,
    pub targets: usize,
    pub mean_time_to_target: Option<f64>,
    pub fov_entry_t: Option<f64>,
    /// Mean true pixel distance to the target over the final second.
    pub steady_state_px: f64,
    /// Largest true |e_z| on visible lateral-phase steps after the first click (mm).
    pub max_abs_ez_lateral: f64,
    /// Circle runs: mean |‖p − c‖ − r| (px) after the first second.
    pub radial_error_px: Option<f64>,
    pub resets: usize,
}

/// Append-only record of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub seed: u64,
    pub steps: Vec<StepRecord>,
    pub outcomes: Vec<TargetOutcome>,
    pub summary: RunSummary,
}

impl RunLog {
    /// Recomputes the summary from the stored steps and outcomes.
    pub fn recompute_summary(&self, cam_c: Vec2) -> RunSummary {
        summarize(&self.steps, &self.outcomes, cam_c)
    }
}

fn summarize(steps: &[StepRecord], outcomes: &[TargetOutcome], c: Vec2) -> RunSummary {
    let reached = outcomes.iter().filter(|o| o.reached).count();
    let times: Vec<f64> = outcomes.iter().filter_map(|o| o.time_to_target).collect();
    let mean_time = (!times.is_empty() && times.len() == outcomes.len()).then(|| times.iter().sum::<f64>() / times.len() as f64);
    let fov_entry_t = steps.iter().find(|s| s.visible).map(|s| s.t);
    let t_end = steps.last().map_or(0.0, |s| s.t);
    let tail: Vec<f64> = steps
        .iter()
        .filter(|s| s.t > t_end - 1.0)
        .filter_map(|s| s.target.map(|g| (Vec2::from(s.pixel) - Vec2::from(g)).norm()))
        .collect();
    let steady = if tail.is_empty() { 0.0 } else { tail.iter().sum::<f64>() / tail.len() as f64 };
    let first_click = steps.iter().position(|s| s.events.click).unwrap_or(steps.len());
    let max_ez = steps[first_click..]
        .iter()
        .filter(|s| s.visible && s.phase == Phase::LateralDominant)
        .map(|s| s.e_z_true.abs())
        .fold(0.0, f64::max);
    RunSummary {
        success: !outcomes.is_empty() && reached == outcomes.len(),
        reached,
        targets: outcomes.len(),
        mean_time_to_target: mean_time,
        fov_entry_t,
        steady_state_px: steady,
        max_abs_ez_lateral: max_ez,
        radial_error_px: None,
        resets: steps.iter().filter(|s| s.events.reset).count(),
    }
    .with_radial(steps, c)
}

impl RunSummary {
    fn with_radial(mut self, steps: &[StepRecord], c: Vec2) -> Self {
        let circle: Vec<&StepRecord> = steps.iter().filter(|s| s.target.is_some()).collect();
        if let (Some(first), true) = (circle.first(), self.targets == 0) {
            let r = (Vec2::from(first.target.unwrap()) - c).norm();
            let t0 = first.t + 1.0;
            let errs: Vec<f64> =
                circle.iter().filter(|s| s.t >= t0).map(|s| ((Vec2::from(s.pixel) - c).norm() - r).abs()).collect();
            if !errs.is_empty() {
                self.radial_error_px = Some(errs.iter().sum::<f64>() / errs.len() as f64);
            }
        }
        self
    }
}

fn finite3(v: &Vec3) -> bool {
    v.iter().all(|x| x.is_finite())
}

#[derive(Debug, Clone, Copy)]
enum Stage {
    Approach,
    Moving { idx: usize, click_k: usize, hold: usize, entry_k: usize },
    Settling { idx: usize, since_k: usize },
    Done,
}

/// Runs one closed-loop episode with the controller using `r_hat`.
pub fn run(cfg: &SimConfig, script: &Script, r_hat: &Mat3, seed: u64) -> Result<RunLog> {
    cfg.validate()?;
    let rig = Rig::from_config(cfg.rig.clone())?;
    let robot = Gantry3;
    let dt = cfg.gains.dt;
    let s = rig.camera.scale;
    let c = rig.camera.c();
    let op = &cfg.operator;
    let mut observer = StreamObserver::new(cfg.corruption, cfg.latency_frames, seed)?;
    let mut tracker = Tracker::new(cfg.tracker, c)?;

    let start_tip = rig.workspace_center + Vec3::from(cfg.start_offset);
    let mut q = (start_tip - rig.tool.r_tip).as_slice().to_vec();
    let tip_model = |q: &[f64]| robot.pose(q).translation + rig.tool.r_tip;
    let z_model_of = |q: &[f64]| (r_hat * tip_model(q)).z;
    let mut phase = PhaseState::new(z_model_of(&q));
    let mut v_adm = Vec3::zeros();
    let mut qdot_prev = DVector::zeros(3);
    let mut tip_prev = rig.tip_of(&robot.pose(&q));

    let n_steps = (cfg.max_time / dt).ceil() as usize;
    let mut steps = Vec::with_capacity(n_steps.min(1 << 16));
    let mut outcomes: Vec<TargetOutcome> = Vec::new();
    let mut stage = Stage::Approach;
    let mut target: Option<Vec2> = None;
    let (targets, wait_settle) = match script {
        Script::Reach { targets, wait_settle } => (targets.iter().map(|t| Vec2::from(*t)).collect::<Vec<_>>(), *wait_settle),
        Script::Circle { .. } => (Vec::new(), false),
    };
    let mut circle_t0: Option<f64> = None;
    // Axial micro channel: velocity follows the command with the lag of the
    // axial design model.
    let lag = (-dt / cfg.gains.lag_tau).exp();
    let mut uz_applied = 0.0;

    for k in 0..n_steps {
        let t = k as f64 * dt;
        let tip = rig.tip_of(&robot.pose(&q));
        let tip_vel = (tip - tip_prev) / dt;
        let pixel = rig.pixel_of(&tip);
        let in_view = rig.camera.contains(&pixel);
        let mut events = StepEvents::default();

        // Operator: guide into view, then click.
        let force = if in_view || tracker.state.init_x {
            Vec3::zeros()
        } else {
            operator_force(&tip, &tip_vel, &rig.workspace_center, op)
        };
        let ready = in_view && tracker.state.init_x;
        match (&mut stage, script) {
            (Stage::Approach, Script::Reach { .. }) if ready => {
                stage = Stage::Moving { idx: 0, click_k: k, hold: 0, entry_k: k };
                target = Some(targets[0]);
                events.click = true;
                outcomes.push(TargetOutcome { target: targets[0].into(), click_t: Some(t), reached: false, time_to_target: None });
            }
            (Stage::Approach, Script::Circle { .. }) if ready => {
                circle_t0 = Some(t);
                stage = Stage::Moving { idx: 0, click_k: k, hold: 0, entry_k: k };
                events.click = true;
            }
            _ => {}
        }
        if let (Some(t0), Script::Circle { radius_px, rate_deg_s, duration }) = (circle_t0, script) {
            let th = (rate_deg_s * (t - t0)).to_radians();
            target = Some(c + Vec2::new(th.cos(), th.sin()) * *radius_px);
            if t - t0 > *duration {
                stage = Stage::Done;
            }
        }
        if let Some(g) = target {
            if tracker.target() != g {
                tracker.set_target(g);
            }
        }

        // Sense and estimate.
        let det = observer.observe(&rig, &tip);
        events.dropout = det.dropped;
        let v_model = r_hat * (robot.jacobian_p(&q) * &qdot_prev).fixed_rows::<3>(0).into_owned();
        let snap = tracker.feed(&TrackInput {
            pixel: det.pixel,
            conf: det.conf,
            depth_crops: det.depth_crops,
            shift_px: Vec2::new(v_model.x, v_model.y) * (s * dt),
            shift_z: v_model.z * dt,
        });
        events.reset = snap.reset.reset_x || snap.reset.reset_z;

        // Micro law in the camera plane.
        let (u_x, u_z) = if target.is_some() && !matches!(stage, Stage::Done) {
            let input = MicroInput {
                e_lat: Vec2::new(snap.e_x[0], snap.e_x[1]) / s,
                e_z: snap.e_z,
                z_model: z_model_of(&q),
                z_model_rate: uz_applied,
                vis: snap.visible && snap.init_z,
            };
            let out = micro_step(&input, &phase, &cfg.gains);
            phase = out.phase;
            (out.u_x, out.u_z)
        } else {
            phase.z_ref = z_model_of(&q);
            (Vec2::zeros(), 0.0)
        };
        uz_applied = lag * uz_applied + (1.0 - lag) * u_z;
        let u_robot = r_hat.transpose() * Vec3::new(u_x.x, u_x.y, uz_applied);

        // Macro: dead-zone admittance through the QP.
        let f_tilde = deadzone(&force, &Vec3::from(cfg.admittance.deadzone));
        let (v_new, dp) = admittance_step(&v_adm, &f_tilde, &cfg.admittance);
        v_adm = v_new;
        let jp = robot.jacobian_p(&q);
        let macro_sol = macro_qp(&jp, &robot.jacobian(&q), &dp, &q, &cfg.qp, &|qq: &[f64]| robot.rotation(qq))?;
        let qdot = fuse_commands(&macro_sol.qdot, &u_robot, &jp, &cfg.gains)?;
        if qdot.iter().any(|x| !x.is_finite()) || !finite3(&tip) {
            return Err(Error::NonFinite { step: k, what: "joint rate or tip position".into() });
        }

        // Outcome bookkeeping uses the true pixel of this step.
        if let (Some(g), Script::Reach { .. }) = (target, script) {
            match &mut stage {
                Stage::Moving { idx, click_k, hold, entry_k } => {
                    if (pixel - g).norm() <= op.hold_radius_px && in_view {
                        if *hold == 0 {
                            *entry_k = k;
                        }
                        *hold += 1;
                    } else {
                        *hold = 0;
                    }
                    let timed_out = (k - *click_k) as f64 * dt > op.target_timeout;
                    if *hold >= op.hold_frames || timed_out {
                        let o = outcomes.last_mut().expect("a click precedes every target");
                        if !timed_out || *hold >= op.hold_frames {
                            o.reached = true;
                            o.time_to_target = Some((*entry_k - *click_k) as f64 * dt);
                            events.reached = true;
                        }
                        stage = Stage::Settling { idx: *idx, since_k: k };
                    }
                }
                Stage::Settling { idx, since_k } => {
                    let waited = (k - *since_k) as f64 * dt;
                    let settled = !wait_settle || (phase.phase == Phase::DepthDominant && phase.settled) || waited > op.settle_timeout;
                    if settled {
                        let next = *idx + 1;
                        if next < targets.len() {
                            target = Some(targets[next]);
                            events.click = true;
                            outcomes.push(TargetOutcome { target: targets[next].into(), click_t: Some(t), reached: false, time_to_target: None });
                            stage = Stage::Moving { idx: next, click_k: k, hold: 0, entry_k: k };
                        } else {
                            stage = Stage::Done;
                        }
                    }
                }
                _ => {}
            }
        }

        steps.push(StepRecord {
            k,
            t,
            tip: tip.into(),
            pixel: pixel.into(),
            target: target.map(Into::into),
            e_x: snap.e_x,
            e_z: snap.e_z,
            e_z_true: rig.depth_error(&tip),
            gate_x: snap.gate_x.g,
            gate_z: snap.gate_z.g,
            visible: snap.visible,
            phase: phase.phase,
            u_x: u_x.into(),
            u_z,
            qdot: [qdot[0], qdot[1], qdot[2]],
            force: force.into(),
            events,
        });

        // Exact constant-velocity integration of the kinematic plant.
        tip_prev = tip;
        for (qi, d) in q.iter_mut().zip(qdot.iter()) {
            *qi += d * dt;
        }
        qdot_prev = qdot;
        if matches!(stage, Stage::Done) {
            break;
        }
    }
    for tgt in targets.iter().skip(outcomes.len()) {
        outcomes.push(TargetOutcome { target: (*tgt).into(), click_t: None, reached: false, time_to_target: None });
    }
    let summary = summarize(&steps, &outcomes, c);
    Ok(RunLog { seed, steps, outcomes, summary })
}
