//! Deterministic synthetic microscope world: rig, trajectories, corrupted
//! observations, the defocus sharpness curve and binary tool masks.

mod io;
mod mask;
mod stream;

pub use io::{read_log_jsonl, write_log_jsonl, FrameJson};
pub use mask::{render_mask, render_mask_at_angle, Mask};
pub use stream::{Detection, StreamObserver};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::geometry::{
    euler_matrix, project_weak, CameraModel, Mat3, Pose3, ToolOffset, Vec2, Vec3,
};

/// Ground-truth world: extrinsic, tool, camera and focus model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RigConfig", into = "RigConfig")]
pub struct Rig {
    pub rotation: Mat3,
    pub t_vec: Vec3,
    pub tool: ToolOffset,
    pub camera: CameraModel,
    /// Camera-frame depth of the focal plane (mm).
    pub focal_z: f64,
    /// Width of the sharpness peak (mm).
    pub depth_of_field: f64,
    /// Distance from focus beyond which sharpness is flat (mm).
    pub plateau_onset: f64,
    /// Tip position (robot frame) that images at the principal point in focus.
    pub workspace_center: Vec3,
    /// Image direction from tip to the border entry of the tool (rad).
    pub tool_entry_angle: f64,
    /// Defocus scale of detector noise and confidence loss (mm).
    pub detection_dof: f64,
    euler_deg: [f64; 3],
}

/// Serialized form of [`Rig`]; angles in degrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RigConfig {
    pub euler_deg: [f64; 3],
    pub r_tip: [f64; 3],
    pub tool_length_max: f64,
    pub camera: CameraModel,
    pub focal_z: f64,
    pub depth_of_field: f64,
    pub plateau_onset: f64,
    pub workspace_center: [f64; 3],
    pub tool_entry_deg: f64,
    pub detection_dof: f64,
}

impl Default for RigConfig {
    fn default() -> Self {
        Self {
            euler_deg: [2.0, -3.0, 25.0],
            r_tip: [0.0, 0.0, 0.0],
            tool_length_max: 100.0,
            camera: CameraModel::default(),
            focal_z: 5.0,
            depth_of_field: 1.0,
            plateau_onset: 3.0,
            workspace_center: [10.0, -5.0, 20.0],
            tool_entry_deg: 30.0,
            detection_dof: 0.15,
        }
    }
}

impl TryFrom<RigConfig> for Rig {
    type Error = Error;
    fn try_from(c: RigConfig) -> Result<Self> {
        c.camera.validate()?;
        if !(c.depth_of_field > 0.0) {
            return Err(Error::Config("depth_of_field must be > 0".into()));
        }
        if !(c.plateau_onset > 0.0) || !(c.detection_dof > 0.0) {
            return Err(Error::Config("plateau_onset and detection_dof must be > 0".into()));
        }
        let [x, y, z] = c.euler_deg.map(f64::to_radians);
        let rotation = euler_matrix(x, y, z);
        let tool = ToolOffset::new(Vec3::from(c.r_tip), c.tool_length_max)?;
        let w0 = Vec3::from(c.workspace_center);
        let t_vec = -(rotation * w0) + Vec3::new(0.0, 0.0, c.focal_z);
        Ok(Rig {
            rotation,
            t_vec,
            tool,
            camera: c.camera,
            focal_z: c.focal_z,
            depth_of_field: c.depth_of_field,
            plateau_onset: c.plateau_onset,
            workspace_center: w0,
            tool_entry_angle: c.tool_entry_deg.to_radians(),
            detection_dof: c.detection_dof,
            euler_deg: c.euler_deg,
        })
    }
}

impl From<Rig> for RigConfig {
    fn from(r: Rig) -> Self {
        RigConfig {
            euler_deg: r.euler_deg,
            r_tip: r.tool.r_tip.into(),
            tool_length_max: 100.0,
            camera: r.camera,
            focal_z: r.focal_z,
            depth_of_field: r.depth_of_field,
            plateau_onset: r.plateau_onset,
            workspace_center: r.workspace_center.into(),
            tool_entry_deg: r.tool_entry_angle.to_degrees(),
            detection_dof: r.detection_dof,
        }
    }
}

impl Default for Rig {
    fn default() -> Self {
        Rig::try_from(RigConfig::default()).expect("default rig is valid")
    }
}

impl Rig {
    pub fn from_config(c: RigConfig) -> Result<Self> {
        Rig::try_from(c)
    }

    pub fn euler_deg(&self) -> [f64; 3] {
        self.euler_deg
    }

    pub fn tip_of(&self, pose: &Pose3) -> Vec3 {
        crate::geometry::tip_world(pose, &self.tool)
    }

    pub fn to_camera(&self, tip: &Vec3) -> Vec3 {
        self.rotation * tip + self.t_vec
    }

    pub fn pixel_of(&self, tip: &Vec3) -> Vec2 {
        project_weak(&self.camera, &self.rotation, &self.t_vec, tip)
    }

    /// Signed distance of the tip from the focal plane (mm).
    pub fn depth_error(&self, tip: &Vec3) -> f64 {
        self.to_camera(tip).z - self.focal_z
    }

    pub fn tip_from_camera(&self, p_cam: &Vec3) -> Vec3 {
        self.rotation.transpose() * (p_cam - self.t_vec)
    }

    /// End-effector pose (fixed orientation) that places the tip at `tip`.
    pub fn pose_for_tip(&self, tip: &Vec3) -> Pose3 {
        Pose3::from_translation(tip - self.tool.r_tip)
    }

    /// Camera-plane millimetres of a pixel at the focal depth.
    pub fn pixel_to_plane(&self, px: &Vec2) -> Vec2 {
        (px - self.camera.c()) / self.camera.scale
    }
}

/// Symmetric sharpness curve: Gaussian peak at the focal plane that meets a
/// flat floor at `plateau_onset`.
pub fn sharpness_profile(rig: &Rig, z: f64) -> f64 {
    const FLOOR: f64 = 0.05;
    let d = (z - rig.focal_z).abs();
    let p = rig.plateau_onset;
    if d >= p {
        return FLOOR;
    }
    let w2 = 2.0 * rig.depth_of_field * rig.depth_of_field;
    let edge = (-p * p / w2).exp();
    let amp = (1.0 - FLOOR) / (1.0 - edge);
    FLOOR + amp * ((-d * d / w2).exp() - edge)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrajectoryKind {
    LateralSweep,
    AxialScan,
    SPattern9,
    Circle { radius_px: f64, rate_deg_s: f64 },
    CenterEdgeCenter,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    #[serde(flatten)]
    pub kind: TrajectoryKind,
    pub duration: f64,
    pub sample_rate: f64,
    /// Lateral (or axial, for scans) amplitude in mm.
    pub amplitude: f64,
    /// Out-of-plane excursion added to lateral sweeps (mm).
    #[serde(default)]
    pub axial_amplitude: f64,
    /// Base sweep frequency (Hz).
    #[serde(default = "default_sweep_hz")]
    pub frequency_hz: f64,
}

fn default_sweep_hz() -> f64 {
    0.12
}

impl TrajectorySpec {
    pub fn lateral_sweep(duration: f64, sample_rate: f64, amplitude: f64) -> Self {
        Self {
            kind: TrajectoryKind::LateralSweep,
            duration,
            sample_rate,
            amplitude,
            axial_amplitude: 0.0,
            frequency_hz: default_sweep_hz(),
        }
    }

    pub fn axial_scan(duration: f64, sample_rate: f64, amplitude: f64) -> Self {
        Self { kind: TrajectoryKind::AxialScan, ..Self::lateral_sweep(duration, sample_rate, amplitude) }
    }

    pub fn samples(&self) -> usize {
        (self.duration * self.sample_rate).round().max(0.0) as usize
    }

    pub fn validate(&self, cam: &CameraModel) -> Result<()> {
        if !(self.sample_rate > 0.0) {
            return domain("sample_rate must be > 0");
        }
        if !(self.duration >= 0.0) || !(self.amplitude >= 0.0) {
            return domain("duration and amplitude must be non-negative");
        }
        let half = cam.width.min(cam.height) as f64 / 2.0;
        match self.kind {
            TrajectoryKind::Circle { radius_px, .. } => {
                if !(radius_px > 0.0 && radius_px < half) {
                    return domain(format!("circle radius {radius_px} px must be in (0, {half})"));
                }
            }
            TrajectoryKind::AxialScan => {}
            _ => {
                if self.amplitude * cam.scale >= half {
                    return domain(format!(
                        "amplitude {} mm leaves the field of view (limit {:.3} mm)",
                        self.amplitude,
                        half / cam.scale
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimedPose {
    pub t: f64,
    pub pose: Pose3,
}

/// Nine plane targets (mm, camera-aligned) in boustrophedon order.
pub fn s_pattern_targets(amplitude: f64) -> Vec<Vec2> {
    let mut out = Vec::with_capacity(9);
    for (row, y) in [-amplitude, 0.0, amplitude].into_iter().enumerate() {
        let xs = [-amplitude, 0.0, amplitude];
        let it: Box<dyn Iterator<Item = &f64>> =
            if row % 2 == 0 { Box::new(xs.iter()) } else { Box::new(xs.iter().rev()) };
        for &x in it {
            out.push(Vec2::new(x, y));
        }
    }
    out
}

fn piecewise(points: &[Vec3], u: f64) -> Vec3 {
    let segs = points.len() - 1;
    let x = (u.clamp(0.0, 1.0) * segs as f64).min(segs as f64 - 1e-12);
    let i = x.floor() as usize;
    let f = x - i as f64;
    points[i] * (1.0 - f) + points[i + 1] * f
}

/// Poses of the end effector for the requested manoeuvre.
pub fn generate_trajectory(spec: &TrajectorySpec, rig: &Rig, seed: u64) -> Result<Vec<TimedPose>> {
    spec.validate(&rig.camera)?;
    let n = spec.samples();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ph: [f64; 3] = [
        rng.random::<f64>() * std::f64::consts::TAU,
        rng.random::<f64>() * std::f64::consts::TAU,
        rng.random::<f64>() * std::f64::consts::TAU,
    ];
    let jitter_f = 1.0 + 0.1 * (rng.random::<f64>() - 0.5);
    let a = spec.amplitude;
    let zf = rig.focal_z;
    let total = spec.duration.max(1e-12);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / spec.sample_rate;
        let u = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
        let p_cam = match spec.kind {
            TrajectoryKind::LateralSweep => {
                let w = std::f64::consts::TAU * spec.frequency_hz * jitter_f;
                Vec3::new(
                    a * (w * t + ph[0]).sin(),
                    a * (1.37 * w * t + ph[1]).sin(),
                    zf + spec.axial_amplitude * (0.61 * w * t + ph[2]).sin(),
                )
            }
            TrajectoryKind::AxialScan => Vec3::new(0.0, 0.0, zf - a + 2.0 * a * u),
            TrajectoryKind::SPattern9 => {
                let pts: Vec<Vec3> = std::iter::once(Vec2::zeros())
                    .chain(s_pattern_targets(a))
                    .map(|p| Vec3::new(p.x, p.y, zf))
                    .collect();
                piecewise(&pts, t / total)
            }
            TrajectoryKind::Circle { radius_px, rate_deg_s } => {
                let r = radius_px / rig.camera.scale;
                let th = (rate_deg_s * t).to_radians();
                Vec3::new(r * th.cos(), r * th.sin(), zf)
            }
            TrajectoryKind::CenterEdgeCenter => {
                let pts = [Vec3::new(0.0, 0.0, zf), Vec3::new(a, 0.0, zf), Vec3::new(0.0, 0.0, zf)];
                piecewise(&pts, t / total)
            }
        };
        let tip = rig.tip_from_camera(&p_cam);
        out.push(TimedPose { t, pose: rig.pose_for_tip(&tip) });
    }
    Ok(out)
}

/// Observation corruption applied by [`observe`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorruptionSpec {
    pub pixel_noise_sigma: f64,
    pub jitter_frames_max: u32,
    pub dropout_rate: f64,
    pub dropout_burst_max: u32,
    pub outlier_rate: f64,
    pub outlier_magnitude: f64,
    pub depth_noise_sigma: f64,
    pub confidence_clean: f64,
    pub confidence_degraded: f64,
    /// Δκ = Δf/f − ΔZ/Z, applied about the principal point.
    pub scale_perturbation: f64,
    /// Growth of pixel noise with squared normalised defocus.
    pub defocus_noise_gain: f64,
    /// Fraction of the base confidence kept far from focus.
    pub defocus_conf_floor: f64,
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        Self {
            pixel_noise_sigma: 0.0,
            jitter_frames_max: 0,
            dropout_rate: 0.0,
            dropout_burst_max: 1,
            outlier_rate: 0.0,
            outlier_magnitude: 0.0,
            depth_noise_sigma: 0.0,
            confidence_clean: 0.9,
            confidence_degraded: 0.3,
            scale_perturbation: 0.0,
            defocus_noise_gain: 0.0,
            defocus_conf_floor: 0.5,
        }
    }
}

impl CorruptionSpec {
    pub fn clean() -> Self {
        Self::default()
    }

    /// Confidence multiplier for squared normalised defocus `d2`.
    pub fn defocus_confidence(&self, d2: f64) -> f64 {
        self.defocus_conf_floor + (1.0 - self.defocus_conf_floor) * (-0.5 * d2).exp()
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("dropout_rate", self.dropout_rate),
            ("outlier_rate", self.outlier_rate),
            ("confidence_clean", self.confidence_clean),
            ("confidence_degraded", self.confidence_degraded),
            ("defocus_conf_floor", self.defocus_conf_floor),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} outside [0, 1]")));
            }
        }
        for (name, v) in [
            ("pixel_noise_sigma", self.pixel_noise_sigma),
            ("outlier_magnitude", self.outlier_magnitude),
            ("depth_noise_sigma", self.depth_noise_sigma),
            ("defocus_noise_gain", self.defocus_noise_gain),
        ] {
            if !(v >= 0.0) {
                return Err(Error::Config(format!("{name} = {v} must be >= 0")));
            }
        }
        if self.dropout_burst_max == 0 && self.dropout_rate > 0.0 {
            return Err(Error::Config("dropout_burst_max must be >= 1".into()));
        }
        Ok(())
    }
}

/// One time-stamped frame of the warm-up stream.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub t: f64,
    pub pose: Pose3,
    pub tip3d: Vec3,
    /// Synchronous ground-truth pixel; not serialized.
    pub pixel_true: Option<Vec2>,
    pub pixel_obs: Option<Vec2>,
    pub confidence: Option<f64>,
    pub depth_obs: Option<f64>,
    pub sharpness: Option<f64>,
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct WarmupLog {
    pub frames: Vec<FrameRecord>,
}

impl WarmupLog {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.frames.iter().filter(|f| f.valid).count()
    }

    /// Recomputes ground-truth pixels from a rig (after reading from disk).
    pub fn attach_truth(&mut self, rig: &Rig) {
        for f in &mut self.frames {
            f.pixel_true = Some(rig.pixel_of(&f.tip3d));
        }
    }

    pub fn check(&self) -> Result<()> {
        for w in self.frames.windows(2) {
            if !(w[1].t > w[0].t) {
                return domain("timestamps must be strictly increasing");
            }
        }
        for f in &self.frames {
            if f.valid != f.pixel_obs.is_some() {
                return domain(format!("frame at t={} has inconsistent validity", f.t));
            }
        }
        Ok(())
    }
}

pub(crate) fn beta_draw(rng: &mut ChaCha8Rng, mean: f64) -> f64 {
    const CONC: f64 = 20.0;
    if mean <= 0.0 {
        return 0.0;
    }
    if mean >= 1.0 {
        return 1.0;
    }
    let b = Beta::new(mean * CONC, (1.0 - mean) * CONC).expect("valid beta parameters");
    b.sample(rng).clamp(0.0, 1.0)
}

/// Corrupted observation stream for a pose sequence.
pub fn observe(rig: &Rig, poses: &[TimedPose], c: &CorruptionSpec, seed: u64) -> Result<WarmupLog> {
    c.validate()?;
    let n = poses.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0b5e);
    let std = Normal::new(0.0, 1.0).unwrap();
    let tips: Vec<Vec3> = poses.iter().map(|p| rig.tip_of(&p.pose)).collect();

    // burst dropout mask
    let mut dropped = vec![false; n];
    if c.dropout_rate > 0.0 {
        let mean_len = (1.0 + c.dropout_burst_max as f64) / 2.0;
        let p_start = (c.dropout_rate / mean_len).min(1.0);
        let mut i = 0;
        while i < n {
            if rng.random::<f64>() < p_start {
                let len = rng.random_range(1..=c.dropout_burst_max) as usize;
                for d in dropped.iter_mut().skip(i).take(len) {
                    *d = true;
                }
                i += len;
            } else {
                i += 1;
            }
        }
    }

    let k = c.jitter_frames_max as i64;
    let cc = rig.camera.c();
    let mut frames = Vec::with_capacity(n);
    for i in 0..n {
        let kt = if k > 0 { rng.random_range(-k..=k) } else { 0 };
        let j = (i as i64 + kt).clamp(0, n as i64 - 1) as usize;
        let noise = Vec2::new(std.sample(&mut rng), std.sample(&mut rng));
        let is_outlier = rng.random::<f64>() < c.outlier_rate;
        let out_dir = rng.random::<f64>() * std::f64::consts::TAU;
        let depth_noise = std.sample(&mut rng);
        let pixel_true = rig.pixel_of(&tips[i]);
        let valid = !dropped[i];
        let near_gap = (i > 0 && dropped[i - 1]) || (i + 1 < n && dropped[i + 1]);
        let (pixel_obs, confidence, depth_obs, sharpness) = if valid {
            let ez = rig.depth_error(&tips[j]);
            let defocus = (ez / rig.detection_dof).powi(2);
            let sigma = c.pixel_noise_sigma * (1.0 + c.defocus_noise_gain * defocus);
            let mut px = cc + (rig.pixel_of(&tips[j]) - cc) * (1.0 + c.scale_perturbation);
            if sigma > 0.0 {
                px += noise * sigma;
            }
            if is_outlier {
                px += Vec2::new(out_dir.cos(), out_dir.sin()) * c.outlier_magnitude;
            }
            let base = if is_outlier || near_gap { c.confidence_degraded } else { c.confidence_clean };
            let conf = beta_draw(&mut rng, base * c.defocus_confidence(defocus));
            let ez_obs = ez + c.depth_noise_sigma * depth_noise;
            let sharp = sharpness_profile(rig, rig.to_camera(&tips[j]).z);
            (Some(px), Some(conf), Some(ez_obs), Some(sharp))
        } else {
            (None, None, None, None)
        };
        frames.push(FrameRecord {
            t: poses[i].t,
            pose: poses[i].pose,
            tip3d: tips[i],
            pixel_true: Some(pixel_true),
            pixel_obs,
            confidence,
            depth_obs,
            sharpness,
            valid,
        });
    }
    Ok(WarmupLog { frames })
}

/// Convenience: trajectory followed by observation with derived seeds.
pub fn warmup(rig: &Rig, spec: &TrajectorySpec, c: &CorruptionSpec, seed: u64) -> Result<WarmupLog> {
    let poses = generate_trajectory(spec, rig, seed)?;
    observe(rig, &poses, c, seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_rig_centres_workspace() {
        let rig = Rig::default();
        let px = rig.pixel_of(&rig.workspace_center);
        assert!((px - rig.camera.c()).norm() < 1e-9);
        assert!(rig.depth_error(&rig.workspace_center).abs() < 1e-12);
    }

    #[test]
    fn rig_config_round_trip() {
        let rig = Rig::default();
        let s = serde_json::to_string(&rig).unwrap();
        let back: Rig = serde_json::from_str(&s).unwrap();
        assert!((back.rotation - rig.rotation).abs().max() < 1e-12);
    }

    #[test]
    fn s_pattern_order() {
        let t = s_pattern_targets(1.0);
        assert_eq!(t.len(), 9);
        assert_eq!(t[2], Vec2::new(1.0, -1.0));
        assert_eq!(t[3], Vec2::new(1.0, 0.0));
    }

    #[test]
    fn circle_radius_checked() {
        let rig = Rig::default();
        let mut spec = TrajectorySpec::lateral_sweep(1.0, 30.0, 0.5);
        spec.kind = TrajectoryKind::Circle { radius_px: 400.0, rate_deg_s: 30.0 };
        assert!(generate_trajectory(&spec, &rig, 0).is_err());
    }

    #[test]
    fn burst_dropout_rate_roughly_matches() {
        let rig = Rig::default();
        let spec = TrajectorySpec::lateral_sweep(200.0, 30.0, 1.0);
        let c = CorruptionSpec { dropout_rate: 0.1, dropout_burst_max: 5, ..Default::default() };
        let log = warmup(&rig, &spec, &c, 3).unwrap();
        let frac = 1.0 - log.valid_count() as f64 / log.len() as f64;
        assert!((frac - 0.1).abs() < 0.03, "dropout fraction {frac}");
        log.check().unwrap();
    }
}
