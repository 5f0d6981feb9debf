use serde::{Deserialize, Serialize};

use super::chamfer::chamfer_bidirectional;
use super::loss::velocity_pairs;
use super::CalibResult;
use crate::geometry::{project_weak, CameraModel, Vec2};
use crate::scenario::WarmupLog;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Index-paired error against observed pixels, top 10% trimmed.
    pub reproj_mean: f64,
    pub reproj_std: f64,
    pub chamfer_mean: f64,
    /// `reproj_mean − chamfer_mean`.
    pub asynchrony: f64,
    pub chamfer_max: f64,
    /// Predicted vs observed pixel velocities.
    pub pearson: f64,
    /// Error against synchronous ground-truth pixels, when known.
    pub truth_reproj_mean: Option<f64>,
    pub truth_reproj_std: Option<f64>,
    pub truth_pearson: Option<f64>,
}

/// Mean and population std after dropping the largest `frac` of values.
pub fn trimmed_mean_std(values: &[f64], frac: f64) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let drop = ((v.len() as f64) * frac).floor() as usize;
    let kept = &v[..v.len() - drop.min(v.len() - 1)];
    let n = kept.len() as f64;
    let m = kept.iter().sum::<f64>() / n;
    let var = kept.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    if n < 2 {
        return 0.0;
    }
    let ma = a[..n].iter().sum::<f64>() / n as f64;
    let mb = b[..n].iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (x, y) = (a[i] - ma, b[i] - mb);
        sab += x * y;
        saa += x * x;
        sbb += y * y;
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

/// Full diagnostic suite for a calibration result; `window` is the frame
/// count of each ChamferMax window.
pub fn metrics_report(log: &WarmupLog, res: &CalibResult, cam: &CameraModel, window: usize) -> Diagnostics {
    let proj: Vec<Vec2> = log
        .frames
        .iter()
        .map(|f| {
            let tip = f.pose.rotation * res.tool.r_tip + f.pose.translation;
            project_weak(cam, &res.rotation, &res.t_vec, &tip)
        })
        .collect();
    let valid: Vec<usize> = (0..log.len()).filter(|&i| log.frames[i].valid).collect();
    let obs: Vec<Vec2> = valid.iter().map(|&i| log.frames[i].pixel_obs.unwrap()).collect();
    let errs: Vec<f64> = valid.iter().zip(&obs).map(|(&i, q)| (proj[i] - q).norm()).collect();
    let (reproj_mean, reproj_std) = trimmed_mean_std(&errs, 0.1);
    let chamfer_mean = chamfer_bidirectional(&proj, &obs).unwrap_or(0.0);

    let w = window.max(2);
    let mut chamfer_max: f64 = 0.0;
    let mut start = 0;
    while start < log.len() {
        let end = (start + w).min(log.len());
        let p: Vec<Vec2> = proj[start..end].to_vec();
        let q: Vec<Vec2> = (start..end).filter_map(|i| log.frames[i].pixel_obs).collect();
        if let Ok(c) = chamfer_bidirectional(&p, &q) {
            chamfer_max = chamfer_max.max(c);
        }
        start = end;
    }

    let pairs = velocity_pairs(log);
    let mut pv = Vec::with_capacity(2 * pairs.len());
    let mut ov = Vec::with_capacity(2 * pairs.len());
    for p in &pairs {
        let d = proj[p.j] - proj[p.i];
        pv.extend([d.x, d.y]);
        ov.extend([p.dq.x, p.dq.y]);
    }
    let pear = pearson(&pv, &ov);

    let has_truth = log.frames.iter().all(|f| f.pixel_true.is_some());
    let (truth_reproj_mean, truth_reproj_std, truth_pearson) = if has_truth && !log.is_empty() {
        let te: Vec<f64> = (0..log.len())
            .map(|i| (proj[i] - log.frames[i].pixel_true.unwrap()).norm())
            .collect();
        let (m, s) = trimmed_mean_std(&te, 0.1);
        let mut tv = Vec::with_capacity(2 * pairs.len());
        for p in &pairs {
            let d = log.frames[p.j].pixel_true.unwrap() - log.frames[p.i].pixel_true.unwrap();
            tv.extend([d.x, d.y]);
        }
        (Some(m), Some(s), Some(pearson(&pv, &tv)))
    } else {
        (None, None, None)
    };

    Diagnostics {
        reproj_mean,
        reproj_std,
        chamfer_mean,
        asynchrony: reproj_mean - chamfer_mean,
        chamfer_max,
        pearson: pear,
        truth_reproj_mean,
        truth_reproj_std,
        truth_pearson,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pearson_identical() {
        let a = [1.0, 2.0, 4.0, 3.0];
        assert!((pearson(&a, &a) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn trimming_drops_top_decile() {
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        let (m, _) = trimmed_mean_std(&v, 0.1);
        assert_eq!(m, 5.0);
    }
}
