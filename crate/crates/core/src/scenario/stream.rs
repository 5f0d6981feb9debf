use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{beta_draw, sharpness_profile, CorruptionSpec, Rig};
use crate::error::Result;
use crate::geometry::{Vec2, Vec3};

/// One closed-loop detector output.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub pixel: Option<Vec2>,
    pub conf: f64,
    /// Per-crop depth-error estimates (mm).
    pub depth_crops: Option<Vec<f64>>,
    pub sharpness: f64,
    pub outlier: bool,
    pub dropped: bool,
}

/// Streaming counterpart of the batch observer, with an integer-frame
/// latency instead of jitter.
#[derive(Debug, Clone)]
pub struct StreamObserver {
    pub spec: CorruptionSpec,
    pub latency: usize,
    pub crops: usize,
    rng: ChaCha8Rng,
    burst_left: u32,
    prev_dropped: bool,
    buffer: VecDeque<Vec3>,
}

impl StreamObserver {
    pub fn new(spec: CorruptionSpec, latency: usize, seed: u64) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec,
            latency,
            crops: 5,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x0b5e_57e4),
            burst_left: 0,
            prev_dropped: false,
            buffer: VecDeque::new(),
        })
    }

    fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn observe(&mut self, rig: &Rig, tip: &Vec3) -> Detection {
        let c = self.spec;
        self.buffer.push_back(*tip);
        while self.buffer.len() > self.latency + 1 {
            self.buffer.pop_front();
        }
        let seen = self.buffer[0];

        let mut dropped = false;
        if self.burst_left > 0 {
            self.burst_left -= 1;
            dropped = true;
        } else if c.dropout_rate > 0.0 {
            let mean_len = (1.0 + c.dropout_burst_max as f64) / 2.0;
            if self.rng.random::<f64>() < (c.dropout_rate / mean_len).min(1.0) {
                let len = self.rng.random_range(1..=c.dropout_burst_max.max(1));
                self.burst_left = len - 1;
                dropped = true;
            }
        }
        let noise = Vec2::new(self.normal(), self.normal());
        let outlier = self.rng.random::<f64>() < c.outlier_rate;
        let dir = self.rng.random::<f64>() * std::f64::consts::TAU;
        let ez = rig.depth_error(&seen);
        let sharp = sharpness_profile(rig, rig.to_camera(&seen).z);
        let mut px = rig.camera.c() + (rig.pixel_of(&seen) - rig.camera.c()) * (1.0 + c.scale_perturbation);
        let in_view = rig.camera.contains(&px);
        let after_gap = self.prev_dropped;
        self.prev_dropped = dropped || !in_view;
        if dropped || !in_view {
            return Detection { pixel: None, conf: 0.0, depth_crops: None, sharpness: sharp, outlier: false, dropped };
        }
        let d2 = (ez / rig.detection_dof).powi(2);
        px += noise * (c.pixel_noise_sigma * (1.0 + c.defocus_noise_gain * d2));
        if outlier {
            px += Vec2::new(dir.cos(), dir.sin()) * c.outlier_magnitude;
        }
        let base = if outlier || after_gap { c.confidence_degraded } else { c.confidence_clean };
        let conf = beta_draw(&mut self.rng, base * c.defocus_confidence(d2));
        let crops: Vec<f64> = (0..self.crops).map(|_| ez + c.depth_noise_sigma * self.normal()).collect();
        Detection { pixel: Some(px), conf, depth_crops: Some(crops), sharpness: sharp, outlier, dropped: false }
    }
}
