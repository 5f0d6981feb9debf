//! Named experiments: configuration, per-repetition runners and the raw
//! metric samples they produce.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::sim::{run, RunLog, Script, SimConfig};
use crate::calibration::{baseline_euclidean, calibrate, jacobian_regression_result, CalibConfig, CalibProblem, CalibResult};
use crate::controller::{
    adapt_rate, hillclimb_depth_step, micro_step, HillClimbParams, MicroGains, MicroInput, Phase, PhaseState,
};
use crate::error::{Error, Result};
use crate::estimator::{
    extract_peaks, planar_nonconformity, select_candidate, FusionParams, History, TrackInput, Tracker, TrackerConfig,
};
use crate::geometry::{geodesic_angle, so3_exp, Mat3, Vec2, Vec3};
use crate::labeling::Image;
use crate::scenario::{s_pattern_targets, sharpness_profile, warmup, CorruptionSpec, Rig, TrajectorySpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentName {
    CalibAblation,
    TrackingAblation,
    Reach9,
    Circle,
    CenterEdgeCenter,
    DepthRegulation,
    CoverageCheck,
}

impl ExperimentName {
    pub const ALL: [ExperimentName; 7] = [
        Self::CalibAblation,
        Self::TrackingAblation,
        Self::Reach9,
        Self::Circle,
        Self::CenterEdgeCenter,
        Self::DepthRegulation,
        Self::CoverageCheck,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::CalibAblation => "calib_ablation",
            Self::TrackingAblation => "tracking_ablation",
            Self::Reach9 => "reach9",
            Self::Circle => "circle",
            Self::CenterEdgeCenter => "center_edge_center",
            Self::DepthRegulation => "depth_regulation",
            Self::CoverageCheck => "coverage_check",
        }
    }

    pub fn is_closed_loop(&self) -> bool {
        matches!(self, Self::Reach9 | Self::Circle | Self::CenterEdgeCenter)
    }
}

impl fmt::Display for ExperimentName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment '{s}'")))
    }
}

/// Synthetic warm-up used for calibration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WarmupSpec {
    pub trajectory: TrajectorySpec,
    pub corruption: CorruptionSpec,
}

impl Default for WarmupSpec {
    fn default() -> Self {
        let mut trajectory = TrajectorySpec::lateral_sweep(500.0 / 30.0, 30.0, 1.5);
        trajectory.axial_amplitude = 1.5;
        Self {
            trajectory,
            corruption: CorruptionSpec { pixel_noise_sigma: 1.0, jitter_frames_max: 3, ..Default::default() },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CircleSpec {
    pub radius_px: f64,
    pub rate_deg_s: f64,
    pub duration: f64,
}

impl Default for CircleSpec {
    fn default() -> Self {
        Self { radius_px: 200.0, rate_deg_s: 30.0, duration: 12.0 }
    }
}

/// Heat-map stream with injected distractor peaks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackingSpec {
    pub frames: usize,
    /// Frames excluded from steady-state statistics.
    pub burn_in: usize,
    pub outlier_rate: f64,
    pub outlier_px: f64,
    pub noise_px: f64,
    pub heat_sigma: f64,
    pub image_size: usize,
    /// Path radius (px) and angular rate (rad/frame).
    pub path_radius: f64,
    pub path_rate: f64,
    pub fusion: FusionParams,
}

impl Default for TrackingSpec {
    fn default() -> Self {
        Self {
            frames: 300,
            burn_in: 30,
            outlier_rate: 0.10,
            outlier_px: 20.0,
            noise_px: 1.0,
            heat_sigma: 2.0,
            image_size: 96,
            path_radius: 25.0,
            path_rate: 0.02,
            fusion: FusionParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DepthRegSpec {
    /// Initial |e_z| values (mm); each trial alternates the sign.
    pub offsets: Vec<f64>,
    pub trials: usize,
    pub hill: HillClimbParams,
    /// Frames per hill-climb iteration (two probes and the move).
    pub frames_per_iteration: usize,
    /// Replace the hill-climb gain with [`profile_normalized_gain`].
    pub normalize_gain: bool,
    pub sharpness_noise: f64,
    pub depth_noise: f64,
    pub max_frames: usize,
    pub band: f64,
    pub consecutive: usize,
}

impl Default for DepthRegSpec {
    fn default() -> Self {
        Self {
            offsets: vec![1.0, 2.0, 3.0, 4.0, 5.0],
            trials: 7,
            hill: HillClimbParams::default(),
            frames_per_iteration: 3,
            normalize_gain: true,
            sharpness_noise: 0.002,
            depth_noise: 0.005,
            max_frames: 900,
            band: 0.03,
            consecutive: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoverageSpec {
    pub steps: usize,
    pub level: f64,
    pub noise_px: f64,
    /// Stationary speed (px/s) and correlation time (s) of the tip.
    pub velocity_std: f64,
    pub velocity_tau: f64,
}

impl Default for CoverageSpec {
    fn default() -> Self {
        Self { steps: 5000, level: 0.95, noise_px: 2.0, velocity_std: 10.0, velocity_tau: 1.0 }
    }
}

/// One named experiment with all of its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Experiment {
    pub name: ExperimentName,
    pub seed: u64,
    pub repeats: usize,
    pub warmup: WarmupSpec,
    pub calib: CalibConfig,
    pub sim: SimConfig,
    /// Rotation error injected into the corrupted calibration (deg, axis).
    pub corrupt_deg: f64,
    pub corrupt_axis: [f64; 3],
    pub pattern_amplitude_mm: f64,
    /// Tip start for reach runs (mm from the focused workspace centre).
    pub approach_offset: [f64; 3],
    pub circle: CircleSpec,
    /// Horizontal offset of the edge target from the principal point (px).
    pub edge_px: f64,
    pub tracking: TrackingSpec,
    pub depth: DepthRegSpec,
    pub coverage: CoverageSpec,
}

impl Default for Experiment {
    fn default() -> Self {
        Self::new(ExperimentName::Reach9)
    }
}

impl Experiment {
    pub fn new(name: ExperimentName) -> Self {
        let repeats = match name {
            ExperimentName::CalibAblation => 10,
            ExperimentName::CenterEdgeCenter => 3,
            ExperimentName::DepthRegulation => 1,
            _ => 5,
        };
        Self {
            name,
            seed: 0,
            repeats,
            warmup: WarmupSpec::default(),
            calib: CalibConfig::default(),
            sim: SimConfig::default(),
            corrupt_deg: 15.0,
            corrupt_axis: [1.0, 1.0, 1.0],
            pattern_amplitude_mm: 0.85,
            approach_offset: [30.0, 0.0, 0.0],
            circle: CircleSpec::default(),
            edge_px: 256.0,
            tracking: TrackingSpec::default(),
            depth: DepthRegSpec::default(),
            coverage: CoverageSpec::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be >= 1".into()));
        }
        let rig = self.rig()?;
        self.warmup.trajectory.validate(&rig.camera)?;
        self.warmup.corruption.validate()?;
        self.sim.validate()?;
        self.tracking.fusion.validate()?;
        self.depth.hill.validate()?;
        if Vec3::from(self.corrupt_axis).norm() == 0.0 || !self.corrupt_deg.is_finite() {
            return Err(Error::Config("corruption axis must be non-zero".into()));
        }
        if self.depth.offsets.is_empty() || self.depth.trials == 0 || self.depth.frames_per_iteration == 0 {
            return Err(Error::Config("depth regulation needs offsets, trials and frames per iteration".into()));
        }
        if !(self.coverage.level > 0.0 && self.coverage.level < 1.0) || self.coverage.steps < 10 {
            return Err(Error::Config("coverage level must be in (0, 1) with >= 10 steps".into()));
        }
        if !(self.tracking.outlier_rate >= 0.0 && self.tracking.outlier_rate <= 1.0)
            || self.tracking.frames <= self.tracking.burn_in
            || self.tracking.image_size < 16
        {
            return Err(Error::Config("tracking stream parameters out of range".into()));
        }
        Ok(())
    }

    pub fn rig(&self) -> Result<Rig> {
        Rig::from_config(self.sim.rig.clone())
    }

    /// Seed of repetition `i`.
    pub fn rep_seed(&self, i: usize) -> u64 {
        self.seed.wrapping_mul(1_000_003).wrapping_add(i as u64)
    }

    pub fn corruption_rotation(&self) -> Mat3 {
        so3_exp(&(Vec3::from(self.corrupt_axis).normalize() * self.corrupt_deg.to_radians()))
    }
}

/// Raw per-repetition values of one metric for one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSamples {
    pub method: String,
    pub metric: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutput {
    pub experiment: ExperimentName,
    pub samples: Vec<MetricSamples>,
    /// Closed-loop logs as `(method, log)` in seed order.
    #[serde(skip)]
    pub logs: Vec<(String, RunLog)>,
}

impl ExperimentOutput {
    pub fn values(&self, method: &str, metric: &str) -> Option<&[f64]> {
        self.samples.iter().find(|s| s.method == method && s.metric == metric).map(|s| s.values.as_slice())
    }
}

#[derive(Default)]
struct Collector {
    samples: Vec<MetricSamples>,
}

impl Collector {
    fn push(&mut self, method: &str, metric: &str, v: f64) {
        match self.samples.iter_mut().find(|s| s.method == method && s.metric == metric) {
            Some(s) => s.values.push(v),
            None => self.samples.push(MetricSamples { method: method.into(), metric: metric.into(), values: vec![v] }),
        }
    }
}

/// Maps `f` over `0..n` on a small scoped pool; results stay in index order.
pub fn par_map<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let workers = std::thread::available_parallelism().map_or(1, |p| p.get()).min(n.max(1));
    if workers <= 1 {
        return (0..n).map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|sc| {
        for _ in 0..workers {
            sc.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let v = f(i);
                slots.lock().expect("pool slot lock")[i] = Some(v);
            });
        }
    });
    slots.into_inner().expect("pool slot lock").into_iter().map(|v| v.expect("every index computed")).collect()
}

/// The three calibration results of one warm-up.
#[derive(Debug, Clone)]
pub struct CalibTriple {
    pub seed: u64,
    pub proposed: CalibResult,
    pub euclidean: CalibResult,
    pub jacobian: CalibResult,
}

pub fn calibrate_all(exp: &Experiment, rig: &Rig, seed: u64) -> Result<CalibTriple> {
    let log = warmup(rig, &exp.warmup.trajectory, &exp.warmup.corruption, seed)?;
    let p = CalibProblem::new(&log, rig.camera).with_config(exp.calib);
    Ok(CalibTriple {
        seed,
        proposed: calibrate(&p)?,
        euclidean: baseline_euclidean(&p)?,
        jacobian: jacobian_regression_result(&p)?,
    })
}

/// Rotation estimated by the proposed method on the warm-up of `seed`.
pub fn proposed_rotation(exp: &Experiment, rig: &Rig, seed: u64) -> Result<Mat3> {
    let log = warmup(rig, &exp.warmup.trajectory, &exp.warmup.corruption, seed)?;
    let p = CalibProblem::new(&log, rig.camera).with_config(exp.calib);
    Ok(calibrate(&p)?.rotation)
}

pub fn run_experiment(exp: &Experiment) -> Result<ExperimentOutput> {
    exp.validate()?;
    match exp.name {
        ExperimentName::CalibAblation => run_calib_ablation(exp),
        ExperimentName::TrackingAblation => run_tracking_ablation(exp),
        ExperimentName::DepthRegulation => run_depth_regulation(exp),
        ExperimentName::CoverageCheck => run_coverage(exp),
        _ => run_closed_loop(exp, None),
    }
}

fn run_calib_ablation(exp: &Experiment) -> Result<ExperimentOutput> {
    let rig = exp.rig()?;
    let triples = par_map(exp.repeats, |i| calibrate_all(exp, &rig, exp.rep_seed(i)));
    let mut col = Collector::default();
    for t in triples {
        let t = t?;
        for (name, r) in [("bi_chamfer", &t.proposed), ("euclidean", &t.euclidean), ("jacobian_regression", &t.jacobian)] {
            let d = &r.diagnostics;
            col.push(name, "rotation_error_deg", geodesic_angle(&r.rotation, &rig.rotation).to_degrees());
            col.push(name, "reprojection_px", d.truth_reproj_mean.unwrap_or(f64::NAN));
            col.push(name, "reprojection_observed_px", d.reproj_mean);
            col.push(name, "chamfer_px", d.chamfer_mean);
            col.push(name, "asynchrony_px", d.asynchrony);
            col.push(name, "pearson", d.truth_pearson.unwrap_or(f64::NAN));
            col.push(name, "pearson_observed", d.pearson);
        }
    }
    Ok(ExperimentOutput { experiment: exp.name, samples: col.samples, logs: Vec::new() })
}

/// Closed-loop script of an experiment.
pub fn script_for(exp: &Experiment, rig: &Rig) -> Script {
    let c = rig.camera.c();
    let s = rig.camera.scale;
    match exp.name {
        ExperimentName::Circle => Script::Circle {
            radius_px: exp.circle.radius_px,
            rate_deg_s: exp.circle.rate_deg_s,
            duration: exp.circle.duration,
        },
        ExperimentName::CenterEdgeCenter => Script::Reach {
            targets: vec![(c + Vec2::new(exp.edge_px, 0.0)).into(), c.into()],
            wait_settle: true,
        },
        _ => Script::Reach {
            targets: s_pattern_targets(exp.pattern_amplitude_mm).iter().map(|t| (c + t * s).into()).collect(),
            wait_settle: false,
        },
    }
}

/// Closed-loop config of an experiment: reach runs start outside the view.
pub fn sim_config_for(exp: &Experiment, rig: &Rig) -> SimConfig {
    let mut cfg = exp.sim.clone();
    match exp.name {
        ExperimentName::Reach9 => cfg.start_offset = exp.approach_offset,
        ExperimentName::Circle => {
            let p = Vec2::new(exp.circle.radius_px, 0.0) / rig.camera.scale;
            let d = rig.rotation.transpose() * Vec3::new(p.x, p.y, 0.0);
            cfg.start_offset = d.into();
        }
        _ => {}
    }
    cfg
}

/// Runs proposed and corrupted calibrations through the closed loop.
/// `rotations` may supply precomputed proposed rotations per repetition.
pub fn run_closed_loop(exp: &Experiment, rotations: Option<&[Mat3]>) -> Result<ExperimentOutput> {
    let rig = exp.rig()?;
    let script = script_for(exp, &rig);
    let cfg = sim_config_for(exp, &rig);
    let corr = exp.corruption_rotation();
    let runs = par_map(exp.repeats, |i| -> Result<[RunLog; 2]> {
        let seed = exp.rep_seed(i);
        let r_hat = match rotations.and_then(|r| r.get(i)) {
            Some(r) => *r,
            None => proposed_rotation(exp, &rig, seed)?,
        };
        Ok([run(&cfg, &script, &r_hat, seed)?, run(&cfg, &script, &(corr * r_hat), seed)?])
    });
    let mut col = Collector::default();
    let mut logs = Vec::new();
    for r in runs {
        let [p, c] = r?;
        for (name, l) in [("proposed", p), ("corrupted", c)] {
            let s = &l.summary;
            col.push(name, "success", if s.success { 1.0 } else { 0.0 });
            col.push(name, "reached", s.reached as f64);
            col.push(name, "time_to_target_s", s.mean_time_to_target.unwrap_or(f64::INFINITY));
            col.push(name, "steady_state_px", s.steady_state_px);
            col.push(name, "max_abs_ez_lateral_mm", s.max_abs_ez_lateral);
            col.push(name, "watchdog_resets", s.resets as f64);
            if let Some(e) = s.radial_error_px {
                col.push(name, "radial_error_px", e);
            }
            logs.push((name.to_string(), l));
        }
    }
    if exp.name != ExperimentName::Reach9 {
        col.samples.retain(|s| s.metric != "time_to_target_s" || s.values.iter().all(|v| v.is_finite()));
    }
    Ok(ExperimentOutput { experiment: exp.name, samples: col.samples, logs })
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Per-frame absolute errors (px) of raw argmax detection and of temporal
/// candidate selection on one outlier-injected heat-map stream.
pub fn tracking_stream(spec: &TrackingSpec, fusion: &FusionParams, seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7ac4);
    let n = spec.image_size;
    let centre = Vec2::new(n as f64 / 2.0, n as f64 / 2.0);
    let mut history = History::default();
    let (mut raw_err, mut sel_err) = (Vec::new(), Vec::new());
    let two_s2 = 2.0 * spec.heat_sigma * spec.heat_sigma;
    for k in 0..spec.frames {
        let th = spec.path_rate * k as f64;
        let truth = centre + Vec2::new(th.cos(), th.sin()) * spec.path_radius;
        let det = truth + Vec2::new(normal(&mut rng), normal(&mut rng)) * spec.noise_px;
        let true_heat = 0.8 + 0.1 * rng.random::<f64>();
        let mut peaks = vec![(det, true_heat)];
        if rng.random::<f64>() < spec.outlier_rate {
            let a = rng.random::<f64>() * std::f64::consts::TAU;
            let o = truth + Vec2::new(a.cos(), a.sin()) * spec.outlier_px;
            peaks.push((o, 0.95 + 0.05 * rng.random::<f64>()));
        }
        let img = Image::from_fn(n, n, |x, y| {
            let p = Vec2::new(x as f64, y as f64);
            peaks.iter().map(|(c, h)| h * (-(p - c).norm_squared() / two_s2).exp()).fold(0.0, f64::max)
        });
        let cold = history.last().is_none();
        let cands = extract_peaks(&img, history.last(), cold, fusion);
        let raw = cands
            .iter()
            .max_by(|a, b| a.heat.total_cmp(&b.heat))
            .map(|c| c.pixel)
            .ok_or(Error::Empty("heat-map peaks"))?;
        let vel = history.mean_step();
        let pred = history.last().map(|l| l + vel.unwrap_or_else(Vec2::zeros));
        let sel = select_candidate(&cands, &history, vel, pred, fusion);
        let chosen = if sel.is_lost() { raw } else { sel.pixel.unwrap_or(raw) };
        history.push(chosen, fusion.history_len);
        if k >= spec.burn_in {
            raw_err.push((raw - truth).norm());
            sel_err.push((chosen - truth).norm());
        }
    }
    Ok((raw_err, sel_err))
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

fn run_tracking_ablation(exp: &Experiment) -> Result<ExperimentOutput> {
    let mut col = Collector::default();
    let heat_only = FusionParams::heat_only();
    let res = par_map(exp.repeats, |i| -> Result<(f64, f64, f64)> {
        let seed = exp.rep_seed(i);
        let (raw, sel) = tracking_stream(&exp.tracking, &exp.tracking.fusion, seed)?;
        let (_, ho) = tracking_stream(&exp.tracking, &heat_only, seed)?;
        Ok((mean(&raw), mean(&sel), mean(&ho)))
    });
    for r in res {
        let (raw, sel, ho) = r?;
        col.push("raw_detection", "mae_px", raw);
        col.push("heat_only", "mae_px", ho);
        col.push("temporal_fusion", "mae_px", sel);
        col.push("temporal_fusion", "attenuation", sel / raw);
    }
    Ok(ExperimentOutput { experiment: exp.name, samples: col.samples, logs: Vec::new() })
}

/// Steps to convergence, `None` if the band is not held in time.
fn first_hold(in_band: &[bool], consecutive: usize) -> Option<usize> {
    let mut run = 0;
    for (i, &b) in in_band.iter().enumerate() {
        run = if b { run + 1 } else { 0 };
        if run >= consecutive {
            return Some(i + 1 - consecutive);
        }
    }
    None
}

/// Frames for the direct depth law to bring `e_z0` into the band.
pub fn micro_depth_rollout(e_z0: f64, spec: &DepthRegSpec, gains: &MicroGains, tracker: &TrackerConfig, seed: u64) -> Result<Option<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd397);
    let mut tr = Tracker::new(*tracker, Vec2::zeros())?;
    let dt = gains.dt;
    let lag = (-dt / gains.lag_tau).exp();
    let mut phase = PhaseState { phase: Phase::DepthDominant, ..PhaseState::new(0.0) };
    let (mut ez, mut v, mut u_prev) = (e_z0, 0.0, 0.0);
    let mut band = Vec::with_capacity(spec.max_frames);
    for _ in 0..spec.max_frames {
        band.push(ez.abs() <= spec.band);
        if first_hold(&band, spec.consecutive).is_some() {
            break;
        }
        let crops: Vec<f64> = (0..5).map(|_| ez + spec.depth_noise * normal(&mut rng)).collect();
        let snap = tr.feed(&TrackInput {
            pixel: Some(Vec2::zeros()),
            conf: 0.9,
            depth_crops: Some(crops),
            shift_px: Vec2::zeros(),
            shift_z: u_prev * dt,
        });
        let out = micro_step(
            &MicroInput { e_lat: Vec2::zeros(), e_z: snap.e_z, z_model: 0.0, z_model_rate: v, vis: snap.init_z },
            &phase,
            gains,
        );
        phase = out.phase;
        v = lag * v + (1.0 - lag) * out.u_z;
        u_prev = v;
        ez += v * dt;
    }
    Ok(first_hold(&band, spec.consecutive))
}

/// Step gain that reaches the move cap exactly at the steepest point of the
/// sharpness profile.
pub fn profile_normalized_gain(rig: &Rig, p: &HillClimbParams) -> f64 {
    let n = 4000;
    let span = rig.plateau_onset;
    let h = p.probe;
    let g_max = (0..=n)
        .map(|i| rig.focal_z + span * i as f64 / n as f64)
        .map(|z| ((sharpness_profile(rig, z + h) - sharpness_profile(rig, z - h)) / (2.0 * h)).abs())
        .fold(0.0, f64::max);
    p.max_step / (p.rho * g_max)
}

/// Frames for the sharpness hill-climb from `e_z0`; each iteration costs
/// `frames_per_iteration` frames.
pub fn hill_depth_rollout(e_z0: f64, rig: &Rig, spec: &DepthRegSpec, seed: u64) -> Option<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4111);
    let mut p = spec.hill;
    if spec.normalize_gain {
        p.gamma = profile_normalized_gain(rig, &p);
    }
    let z0 = rig.focal_z + e_z0;
    let mut z = z0;
    let iters = spec.max_frames / spec.frames_per_iteration;
    let mut band = Vec::with_capacity(iters);
    let mut last_s = f64::NEG_INFINITY;
    for _ in 0..iters {
        band.push((z - rig.focal_z).abs() <= spec.band);
        if first_hold(&band, spec.consecutive).is_some() {
            break;
        }
        let noise = spec.sharpness_noise;
        let mut f = |zz: f64| sharpness_profile(rig, zz) + noise * normal(&mut rng);
        let step = hillclimb_depth_step(z, &mut f, z0, &p);
        if !step.stop {
            let s_new = sharpness_profile(rig, step.z);
            p.rho = adapt_rate(p.rho, s_new > last_s, &spec.hill);
            last_s = s_new;
            z = step.z;
        }
    }
    first_hold(&band, spec.consecutive).map(|i| i * spec.frames_per_iteration)
}

fn run_depth_regulation(exp: &Experiment) -> Result<ExperimentOutput> {
    let rig = exp.rig()?;
    let d = &exp.depth;
    let mut col = Collector::default();
    let mut tracker = exp.sim.tracker;
    tracker.dt = exp.sim.gains.dt;
    for rep in 0..exp.repeats {
        for &off in &d.offsets {
            for t in 0..d.trials {
                let sign = if t % 2 == 0 { 1.0 } else { -1.0 };
                let seed = exp.rep_seed(rep).wrapping_mul(7919).wrapping_add((off * 1000.0) as u64 * 31 + t as u64);
                let m = micro_depth_rollout(sign * off, d, &exp.sim.gains, &tracker, seed)?;
                let h = hill_depth_rollout(sign * off, &rig, d, seed);
                let tag = format!("{off}mm");
                col.push("micro", &format!("frames_{tag}"), m.map_or(f64::INFINITY, |v| v as f64));
                col.push("hillclimb", &format!("frames_{tag}"), h.map_or(f64::INFINITY, |v| v as f64));
                col.push("hillclimb", &format!("failed_{tag}"), if h.is_none() { 1.0 } else { 0.0 });
                col.push("micro", &format!("failed_{tag}"), if m.is_none() { 1.0 } else { 0.0 });
            }
        }
    }
    Ok(ExperimentOutput { experiment: exp.name, samples: col.samples, logs: Vec::new() })
}

/// Nonconformity scores of a tracker following a hovering tip: stationary
/// Ornstein-Uhlenbeck velocity, isotropic pixel noise.
pub fn coverage_scores(cfg: &TrackerConfig, spec: &CoverageSpec, seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0fe);
    let mut tr = Tracker::new(*cfg, Vec2::zeros())?;
    let dt = cfg.dt;
    let decay = (-dt / spec.velocity_tau).exp();
    let kick = spec.velocity_std * (1.0 - decay * decay).sqrt();
    let mut pos = Vec2::zeros();
    let mut vel = Vec2::zeros();
    let mut out = Vec::with_capacity(spec.steps);
    let warm = 100;
    for k in 0..spec.steps + warm {
        vel = vel * decay + Vec2::new(normal(&mut rng), normal(&mut rng)) * kick;
        pos += vel * dt;
        let y = pos + Vec2::new(normal(&mut rng), normal(&mut rng)) * spec.noise_px;
        let probe = crate::estimator::predict(&tr.state, dt, cfg.filter.q0x, cfg.filter.q0z);
        let score = planar_nonconformity(&probe, y, &cfg.gate);
        tr.feed(&TrackInput { pixel: Some(y), conf: 0.9, ..Default::default() });
        if k >= warm {
            if let Some(s) = score {
                out.push(s);
            }
        }
    }
    Ok(out)
}

/// Held-out coverage of a split-conformal quantile. Both splits come from
/// the same deployed filter; installing the quantile in the gate would
/// change the score distribution.
pub fn coverage_trial(cfg: &TrackerConfig, spec: &CoverageSpec, seed: u64) -> Result<(f64, f64)> {
    let cal = coverage_scores(cfg, spec, seed.wrapping_mul(2))?;
    let q = crate::estimator::conformal_calibrate(&cal, spec.level)?;
    let test = coverage_scores(cfg, spec, seed.wrapping_mul(2).wrapping_add(1))?;
    let cov = test.iter().filter(|&&s| s <= q).count() as f64 / test.len() as f64;
    Ok((q, cov))
}

fn run_coverage(exp: &Experiment) -> Result<ExperimentOutput> {
    let mut col = Collector::default();
    let mut cfg = exp.sim.tracker;
    cfg.dt = exp.sim.gains.dt;
    cfg.gate.level = exp.coverage.level;
    for i in 0..exp.repeats {
        let (q, cov) = coverage_trial(&cfg, &exp.coverage, exp.rep_seed(i))?;
        col.push("split_conformal", "quantile", q);
        col.push("split_conformal", "coverage", cov);
    }
    Ok(ExperimentOutput { experiment: exp.name, samples: col.samples, logs: Vec::new() })
}
