use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec2;
use crate::labeling::Image;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionParams {
    pub w_h: f64,
    pub w_m: f64,
    pub w_t: f64,
    pub w_d: f64,
    pub w_c: f64,
    /// Decay scales (px) of the motion, temporal and distance terms.
    pub lambda_m: f64,
    pub lambda_t: f64,
    pub lambda_d: f64,
    pub d_max: f64,
    pub tau_c: f64,
    pub tau_p: f64,
    pub tau_s: f64,
    pub r_fb: f64,
    pub heat_windows: Vec<usize>,
    pub history_len: usize,
    pub cold_top_k: usize,
}

impl Default for FusionParams {
    fn default() -> Self {
        Self {
            w_h: 0.2,
            w_m: 0.3,
            w_t: 0.3,
            w_d: 0.1,
            w_c: 0.1,
            lambda_m: 5.0,
            lambda_t: 5.0,
            lambda_d: 10.0,
            d_max: 40.0,
            tau_c: 0.05,
            tau_p: 0.5,
            tau_s: 0.2,
            r_fb: 30.0,
            heat_windows: vec![5, 11, 21],
            history_len: 5,
            cold_top_k: 5,
        }
    }
}

impl FusionParams {
    /// Heat-only scorer, i.e. raw detection.
    pub fn heat_only() -> Self {
        Self { w_h: 1.0, w_m: 0.0, w_t: 0.0, w_d: 0.0, w_c: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let w = [self.w_h, self.w_m, self.w_t, self.w_d, self.w_c];
        if w.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::Config("fusion weights must be non-negative".into()));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("fusion weights sum to {sum}, expected 1")));
        }
        if !(self.tau_p > self.tau_s) {
            return Err(Error::Config("primary peak threshold must exceed secondary".into()));
        }
        for v in [self.lambda_m, self.lambda_t, self.lambda_d, self.d_max, self.r_fb] {
            if !(v > 0.0) {
                return Err(Error::Config("fusion scales must be positive".into()));
            }
        }
        Ok(())
    }

    /// Motion and temporal terms outweigh the appearance term.
    pub fn temporal_dominant(&self) -> bool {
        self.w_m + self.w_t > self.w_h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub pixel: Vec2,
    pub heat: f64,
    pub conf: f64,
}

/// Recent chosen positions, oldest first.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub positions: VecDeque<Vec2>,
}

impl History {
    pub fn push(&mut self, p: Vec2, cap: usize) {
        self.positions.push_back(p);
        while self.positions.len() > cap.max(1) {
            self.positions.pop_front();
        }
    }

    pub fn last(&self) -> Option<Vec2> {
        self.positions.back().copied()
    }

    /// Mean inter-frame displacement.
    pub fn mean_step(&self) -> Option<Vec2> {
        if self.positions.len() < 2 {
            return None;
        }
        let n = self.positions.len() - 1;
        Some((self.positions[n] - self.positions[0]) / n as f64)
    }

    pub fn clear(&mut self) {
        self.positions.clear();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub index: Option<usize>,
    pub pixel: Option<Vec2>,
    pub score: f64,
}

impl Selection {
    pub fn lost() -> Self {
        Self { index: None, pixel: None, score: 0.0 }
    }

    pub fn is_lost(&self) -> bool {
        self.index.is_none()
    }
}

/// Late-fusion choice among candidates. `velocity` is the filter's pixel
/// velocity per frame and `kf_prediction` its predicted tip pixel.
pub fn select_candidate(
    peaks: &[Candidate],
    history: &History,
    velocity: Option<Vec2>,
    kf_prediction: Option<Vec2>,
    params: &FusionParams,
) -> Selection {
    if peaks.is_empty() {
        return Selection::lost();
    }
    let hmax = peaks.iter().map(|c| c.heat).fold(0.0, f64::max);
    let last = history.last();
    let motion_ref = match (last, history.mean_step()) {
        (Some(p), Some(d)) => Some(p + d),
        _ => None,
    };
    let temp_ref = match (last, velocity) {
        (Some(p), Some(v)) => Some(p + v),
        (Some(p), None) => Some(p),
        _ => None,
    };
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (i, c) in peaks.iter().enumerate() {
        let s_heat = if hmax > 0.0 { (c.heat / hmax).clamp(0.0, 1.0) } else { 0.0 };
        let s_motion = motion_ref.map_or(0.0, |r| (-(c.pixel - r).norm() / params.lambda_m).exp());
        let s_temp = temp_ref.map_or(0.0, |r| (-(c.pixel - r).norm() / params.lambda_t).exp());
        let s_dist = kf_prediction.map_or(0.0, |r| {
            let d = (c.pixel - r).norm();
            if d > params.d_max { 0.0 } else { (-d / params.lambda_d).exp() }
        });
        let s = params.w_h * s_heat
            + params.w_m * s_motion
            + params.w_t * s_temp
            + params.w_d * s_dist
            + params.w_c * c.conf.clamp(0.0, 1.0);
        if s > best_score {
            best_score = s;
            best = i;
        }
    }
    Selection { index: Some(best), pixel: Some(peaks[best].pixel), score: best_score }
}

fn local_maxima(h: &Image) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::new();
    for y in 0..h.height {
        for x in 0..h.width {
            let v = h.at(x, y);
            let mut is_max = true;
            'n: for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= h.width as i64 || ny >= h.height as i64 {
                        continue;
                    }
                    let w = h.at(nx as usize, ny as usize);
                    // plateaus: keep the first pixel in raster order
                    let earlier = dy < 0 || (dy == 0 && dx < 0);
                    if w > v || (w == v && earlier) {
                        is_max = false;
                        break 'n;
                    }
                }
            }
            if is_max {
                out.push((x, y, v));
            }
        }
    }
    out
}

/// Two-stage peak extraction with fallback search and cold-start mode.
pub fn extract_peaks(h: &Image, last: Option<Vec2>, cold: bool, params: &FusionParams) -> Vec<Candidate> {
    let maxima = local_maxima(h);
    let to_cand = |&(x, y, v): &(usize, usize, f64)| Candidate {
        pixel: Vec2::new(x as f64, y as f64),
        heat: v,
        conf: v.clamp(0.0, 1.0),
    };
    if cold {
        let mut m: Vec<_> = maxima.iter().filter(|m| m.2 >= params.tau_c).copied().collect();
        m.sort_by(|a, b| b.2.total_cmp(&a.2));
        m.truncate(params.cold_top_k);
        return m.iter().map(to_cand).collect();
    }
    for tau in [params.tau_p, params.tau_s] {
        let c: Vec<Candidate> = maxima.iter().filter(|m| m.2 >= tau).map(to_cand).collect();
        if !c.is_empty() {
            return c;
        }
    }
    let Some(p) = last else { return Vec::new() };
    let mut best: Option<(usize, usize, f64)> = None;
    let r2 = params.r_fb * params.r_fb;
    for y in 0..h.height {
        for x in 0..h.width {
            let d = Vec2::new(x as f64, y as f64) - p;
            if d.norm_squared() > r2 {
                continue;
            }
            let v = h.at(x, y);
            if v >= params.tau_c && best.map_or(true, |b| v > b.2) {
                best = Some((x, y, v));
            }
        }
    }
    best.iter().map(to_cand).collect()
}

/// Mean over windows of the local z-score of the heat at `(x, y)`, squashed
/// to `[0, 1]` by a logistic.
pub fn heat_zscore(h: &Image, x: usize, y: usize, windows: &[usize]) -> f64 {
    if windows.is_empty() {
        return 0.0;
    }
    let v = h.at(x, y);
    let mut acc = 0.0;
    for &w in windows {
        let r = (w / 2) as i64;
        let (mut s, mut s2, mut n) = (0.0, 0.0, 0.0);
        for dy in -r..=r {
            for dx in -r..=r {
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                if nx < 0 || ny < 0 || nx >= h.width as i64 || ny >= h.height as i64 {
                    continue;
                }
                let u = h.at(nx as usize, ny as usize);
                s += u;
                s2 += u * u;
                n += 1.0;
            }
        }
        let m = s / n;
        let sd = (s2 / n - m * m).max(0.0).sqrt();
        acc += if sd > 0.0 { (v - m) / sd } else { 0.0 };
    }
    let z = acc / windows.len() as f64;
    1.0 / (1.0 + (-z).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn motion_term_peaks_at_extrapolation() {
        let mut h = History::default();
        h.push(Vec2::new(0.0, 0.0), 5);
        h.push(Vec2::new(2.0, 0.0), 5);
        let p = FusionParams { w_h: 0.0, w_m: 1.0, w_t: 0.0, w_d: 0.0, w_c: 0.0, ..Default::default() };
        let c = [Candidate { pixel: Vec2::new(4.0, 0.0), heat: 0.1, conf: 0.0 }];
        let s = select_candidate(&c, &h, None, None, &p);
        assert!((s.score - 1.0).abs() < 1e-15);
    }

    #[test]
    fn single_candidate_always_chosen() {
        let c = [Candidate { pixel: Vec2::new(9.0, 9.0), heat: 0.0, conf: 0.0 }];
        let s = select_candidate(&c, &History::default(), None, None, &FusionParams::default());
        assert_eq!(s.index, Some(0));
        assert!(select_candidate(&[], &History::default(), None, None, &FusionParams::default()).is_lost());
    }

    #[test]
    fn defaults_are_temporally_dominant() {
        let p = FusionParams::default();
        p.validate().unwrap();
        assert!(p.temporal_dominant());
        assert!(!FusionParams::heat_only().temporal_dominant());
    }
}
