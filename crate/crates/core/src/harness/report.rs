//! Aggregation of experiment samples and deterministic CSV / JSON writers.

use serde::{Deserialize, Serialize};

use super::experiments::ExperimentOutput;
use super::sim::RunLog;
use crate::error::{Error, Result};

/// Summary statistics of one metric for one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub experiment: String,
    pub method: String,
    pub metric: String,
    pub n: usize,
    /// Samples that were infinite or NaN (failed runs); excluded from the
    /// statistics below.
    pub n_nonfinite: usize,
    pub mean: f64,
    /// Sample standard deviation; zero for a single sample.
    pub std: f64,
    pub median: f64,
    pub p95: f64,
}

/// Linear-interpolation percentile of sorted data, `q ∈ [0, 1]`.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        n => {
            let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
        }
    }
}

pub fn aggregate(experiment: &str, method: &str, metric: &str, values: &[f64]) -> SummaryRow {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let mean = if n > 0 { v.iter().sum::<f64>() / n as f64 } else { f64::NAN };
    let std = if n > 1 { (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else if n == 1 { 0.0 } else { f64::NAN };
    SummaryRow {
        experiment: experiment.into(),
        method: method.into(),
        metric: metric.into(),
        n: values.len(),
        n_nonfinite: values.len() - n,
        mean,
        std,
        median: percentile_sorted(&v, 0.5),
        p95: percentile_sorted(&v, 0.95),
    }
}

/// One row per (experiment, method, metric) in production order.
pub fn report(outputs: &[ExperimentOutput]) -> Result<Vec<SummaryRow>> {
    if outputs.is_empty() {
        return Err(Error::Empty("experiment outputs"));
    }
    Ok(outputs
        .iter()
        .flat_map(|o| {
            let name = o.experiment.as_str();
            o.samples.iter().map(move |s| aggregate(name, &s.method, &s.metric, &s.values))
        })
        .collect())
}

fn csv_err(e: impl std::fmt::Display) -> Error {
    Error::Io(e.to_string())
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    String::from_utf8(w.into_inner().map_err(csv_err)?).map_err(csv_err)
}

pub fn summary_csv(rows: &[SummaryRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    finish(w)
}

/// Pretty JSON; non-finite statistics become `null`.
pub fn summary_json(rows: &[SummaryRow]) -> Result<String> {
    serde_json::to_string_pretty(rows).map_err(csv_err)
}

/// Raw samples, one row per value, in long format.
pub fn samples_csv(outputs: &[ExperimentOutput]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["experiment", "method", "metric", "repetition", "value"]).map_err(csv_err)?;
    for o in outputs {
        for s in &o.samples {
            for (i, v) in s.values.iter().enumerate() {
                w.write_record([o.experiment.as_str(), &s.method, &s.metric, &i.to_string(), &v.to_string()])
                    .map_err(csv_err)?;
            }
        }
    }
    finish(w)
}

const STEP_HEADER: [&str; 27] = [
    "k", "t", "tip_x", "tip_y", "tip_z", "pixel_u", "pixel_v", "target_u", "target_v", "e_u", "e_v", "e_du", "e_dv",
    "e_z", "e_dz", "e_z_true", "gate_x", "gate_z", "visible", "phase", "u_x", "u_y", "u_z", "dropout", "reset",
    "click", "reached",
];

/// Flat per-step table of one run.
pub fn steps_csv(log: &RunLog) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(STEP_HEADER).map_err(csv_err)?;
    for s in &log.steps {
        let tgt = s.target.map_or([String::new(), String::new()], |t| [t[0].to_string(), t[1].to_string()]);
        let phase = serde_json::to_value(s.phase).map_err(csv_err)?;
        let rec: Vec<String> = [s.k.to_string(), s.t.to_string()]
            .into_iter()
            .chain(s.tip.iter().map(f64::to_string))
            .chain(s.pixel.iter().map(f64::to_string))
            .chain(tgt)
            .chain(s.e_x.iter().map(f64::to_string))
            .chain(s.e_z.iter().map(f64::to_string))
            .chain([s.e_z_true, s.gate_x, s.gate_z].iter().map(f64::to_string))
            .chain([s.visible.to_string(), phase.as_str().unwrap_or_default().to_string()])
            .chain(s.u_x.iter().map(f64::to_string))
            .chain([s.u_z.to_string()])
            .chain([s.events.dropout, s.events.reset, s.events.click, s.events.reached].iter().map(bool::to_string))
            .collect();
        w.write_record(&rec).map_err(csv_err)?;
    }
    finish(w)
}

/// One JSON object per step.
pub fn steps_jsonl(log: &RunLog) -> Result<String> {
    let mut out = String::new();
    for s in &log.steps {
        out.push_str(&serde_json::to_string(s).map_err(csv_err)?);
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_computed_three_run_fixture() {
        let r = aggregate("e", "m", "x", &[1.0, 2.0, 4.0]);
        assert!((r.mean - 7.0 / 3.0).abs() < 1e-12);
        // sample variance: ((4/3)² + (1/3)² + (5/3)²) / 2 = 7/3
        assert!((r.std - (7.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(r.median, 2.0);
        assert!((r.p95 - 3.8).abs() < 1e-12);
    }

    #[test]
    fn perfect_run_is_a_zero_row() {
        let r = aggregate("e", "m", "err", &[0.0]);
        assert_eq!((r.mean, r.std, r.median, r.p95), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn failures_are_counted_not_averaged() {
        let r = aggregate("e", "m", "t", &[1.0, f64::INFINITY, 3.0]);
        assert_eq!((r.n, r.n_nonfinite), (3, 1));
        assert_eq!(r.mean, 2.0);
    }
}
