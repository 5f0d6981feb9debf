use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use microservo::calibration::{baseline_euclidean, calibrate, jacobian_regression_result, CalibProblem};
use microservo::geometry::geodesic_angle;
use microservo::harness::experiments::{run_experiment, Experiment, ExperimentName, ExperimentOutput};
use microservo::harness::{report, samples_csv, steps_csv, steps_jsonl, summary_csv, verify, SummaryRow, VerifyContext};
use microservo::scenario::{read_log_jsonl, warmup, write_log_jsonl};
use serde_json::Value;

#[derive(Parser)]
#[command(name = "microservo", version, about = "Markerless micromanipulation simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write synthetic warm-up logs as JSONL.
    Gen(Common),
    /// Calibrate a warm-up log, or run the calibration ablation.
    Calibrate {
        #[command(flatten)]
        common: Common,
        /// Warm-up log to calibrate instead of generating one.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Tracking ablation or coverage check.
    Track(Common),
    /// Closed-loop and depth-regulation experiments.
    Simulate(Common),
    /// Run the acceptance suite.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Comma-separated criterion ids (default: all).
        #[arg(long, value_delimiter = ',')]
        only: Vec<u8>,
    },
}

#[derive(Args, Clone)]
struct Common {
    /// JSON file with experiment fields; missing fields keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    experiment: Option<String>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Jsonl,
}

impl Format {
    fn ext(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Jsonl => "jsonl",
        }
    }
}

/// Bad flags or configuration; exits with status 2.
#[derive(Debug)]
struct ConfigError(String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let is_config = e.downcast_ref::<ConfigError>().is_some()
                || matches!(e.downcast_ref::<microservo::Error>(), Some(microservo::Error::Config(_)));
            ExitCode::from(if is_config { 2 } else { 1 })
        }
    }
}

fn dispatch(cmd: Cmd) -> anyhow::Result<ExitCode> {
    match cmd {
        Cmd::Gen(c) => gen(&c),
        Cmd::Calibrate { common, log } => match log {
            Some(path) => calibrate_file(&common, &path),
            None => run_suite(&common, &[ExperimentName::CalibAblation]),
        },
        Cmd::Track(c) => run_suite(&c, &[ExperimentName::TrackingAblation, ExperimentName::CoverageCheck]),
        Cmd::Simulate(c) => run_suite(
            &c,
            &[ExperimentName::Reach9, ExperimentName::Circle, ExperimentName::CenterEdgeCenter, ExperimentName::DepthRegulation],
        ),
        Cmd::Verify { common, only } => run_verify(&common, &only),
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Defaults for the experiment, overlaid with the config file and flags.
fn load_experiment(c: &Common, name: ExperimentName) -> anyhow::Result<Experiment> {
    let mut v = serde_json::to_value(Experiment::new(name))?;
    if let Some(path) = &c.config {
        let text = fs::read_to_string(path).map_err(|e| config_err(format!("reading {}: {e}", path.display())))?;
        let mut over: Value =
            serde_json::from_str(&text).map_err(|e| config_err(format!("parsing {}: {e}", path.display())))?;
        if let Value::Object(m) = &mut over {
            m.remove("name");
        }
        merge(&mut v, over);
    }
    let mut exp: Experiment = serde_json::from_value(v).map_err(|e| config_err(format!("config: {e}")))?;
    if let Some(s) = c.seed {
        exp.seed = s;
    }
    if let Some(r) = c.repeats {
        exp.repeats = r;
    }
    exp.validate().map_err(|e| config_err(e.to_string()))?;
    Ok(exp)
}

/// Experiment names chosen by `--experiment`, the config file, or the defaults.
fn selected(c: &Common, allowed: &[ExperimentName]) -> anyhow::Result<Vec<ExperimentName>> {
    let from_config = match &c.config {
        Some(path) => fs::read_to_string(path)
            .ok()
            .and_then(|t| serde_json::from_str::<Value>(&t).ok())
            .and_then(|v| v.get("name").and_then(Value::as_str).map(str::to_owned)),
        None => None,
    };
    let name = match c.experiment.as_deref().map(str::to_owned).or(from_config) {
        None => return Ok(allowed[..1].to_vec()),
        Some(n) if n == "all" => return Ok(allowed.to_vec()),
        Some(n) => n,
    };
    let parsed: ExperimentName = name.parse().map_err(|e: microservo::Error| config_err(e.to_string()))?;
    if !allowed.contains(&parsed) {
        let names: Vec<&str> = allowed.iter().map(|n| n.as_str()).collect();
        bail!(config_err(format!("experiment '{name}' not available here; choose one of {} or all", names.join(", "))));
    }
    Ok(vec![parsed])
}

fn out_dir(c: &Common) -> anyhow::Result<&Path> {
    fs::create_dir_all(&c.out).with_context(|| format!("creating {}", c.out.display()))?;
    Ok(&c.out)
}

fn write(path: PathBuf, body: &str) -> anyhow::Result<()> {
    fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn jsonl<T: serde::Serialize>(rows: &[T]) -> anyhow::Result<String> {
    let mut s = String::new();
    for r in rows {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

fn gen(c: &Common) -> anyhow::Result<ExitCode> {
    let exp = load_experiment(c, ExperimentName::CalibAblation)?;
    let rig = exp.rig().map_err(|e| config_err(e.to_string()))?;
    let dir = out_dir(c)?;
    for i in 0..exp.repeats {
        let seed = exp.rep_seed(i);
        let log = warmup(&rig, &exp.warmup.trajectory, &exp.warmup.corruption, seed)?;
        let path = dir.join(format!("warmup_seed{seed}.jsonl"));
        let mut w = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
        write_log_jsonl(&log, &mut w)?;
        w.flush()?;
        println!("wrote {} ({} frames, {} valid)", path.display(), log.len(), log.valid_count());
    }
    Ok(ExitCode::SUCCESS)
}

fn calibrate_file(c: &Common, path: &Path) -> anyhow::Result<ExitCode> {
    let exp = load_experiment(c, ExperimentName::CalibAblation)?;
    let rig = exp.rig().map_err(|e| config_err(e.to_string()))?;
    let file = File::open(path).map_err(|e| config_err(format!("opening {}: {e}", path.display())))?;
    let log = read_log_jsonl(BufReader::new(file))?;
    let p = CalibProblem::new(&log, rig.camera).with_config(exp.calib);
    let results = [("bi_chamfer", calibrate(&p)?), ("euclidean", baseline_euclidean(&p)?), ("jacobian_regression", jacobian_regression_result(&p)?)];
    let mut doc = serde_json::Map::new();
    for (name, r) in &results {
        let err = geodesic_angle(&r.rotation, &rig.rotation).to_degrees();
        println!("{name:<20} rotation error vs rig {err:7.3} deg  reprojection {:.3} px  asynchrony {:.3} px", r.diagnostics.reproj_mean, r.diagnostics.asynchrony);
        let mut v = serde_json::to_value(r)?;
        if let Value::Object(m) = &mut v {
            m.insert("rotation_error_vs_rig_deg".into(), err.into());
        }
        doc.insert((*name).into(), v);
    }
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("log");
    write(out_dir(c)?.join(format!("calibration_{stem}.json")), &serde_json::to_string_pretty(&Value::Object(doc))?)?;
    Ok(ExitCode::SUCCESS)
}

fn print_rows(rows: &[SummaryRow]) {
    for r in rows {
        println!(
            "{:<20} {:<22} {:<26} n={:<3} mean {:>10.4} std {:>9.4} median {:>10.4} p95 {:>10.4}{}",
            r.experiment,
            r.method,
            r.metric,
            r.n,
            r.mean,
            r.std,
            r.median,
            r.p95,
            if r.n_nonfinite > 0 { format!("  ({} non-finite)", r.n_nonfinite) } else { String::new() }
        );
    }
}

fn write_outputs(c: &Common, out: &ExperimentOutput) -> anyhow::Result<()> {
    let dir = out_dir(c)?;
    let name = out.experiment.as_str();
    let rows = report(std::slice::from_ref(out))?;
    print_rows(&rows);
    let ext = c.format.ext();
    let (summary, samples) = match c.format {
        Format::Csv => (summary_csv(&rows)?, samples_csv(std::slice::from_ref(out))?),
        Format::Jsonl => (jsonl(&rows)?, jsonl(&out.samples)?),
    };
    write(dir.join(format!("{name}_summary.{ext}")), &summary)?;
    write(dir.join(format!("{name}_samples.{ext}")), &samples)?;
    let mut counts = std::collections::BTreeMap::<&str, usize>::new();
    for (method, log) in &out.logs {
        let i = counts.entry(method).or_default();
        let body = match c.format {
            Format::Csv => steps_csv(log)?,
            Format::Jsonl => steps_jsonl(log)?,
        };
        write(dir.join(format!("{name}_{method}_rep{i}_steps.{ext}")), &body)?;
        *i += 1;
    }
    Ok(())
}

fn run_suite(c: &Common, allowed: &[ExperimentName]) -> anyhow::Result<ExitCode> {
    for name in selected(c, allowed)? {
        let exp = load_experiment(c, name)?;
        let out = run_experiment(&exp)?;
        write_outputs(c, &out)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn run_verify(c: &Common, only: &[u8]) -> anyhow::Result<ExitCode> {
    if let Some(bad) = only.iter().find(|id| !(1..=14).contains(*id)) {
        bail!(config_err(format!("no criterion {bad}; ids run from 1 to 14")));
    }
    if c.config.is_some() || c.experiment.is_some() || c.repeats.is_some() {
        bail!(config_err("verify takes only --seed, --out, --format and --only"));
    }
    let seed = c.seed.unwrap_or(0);
    let ctx = VerifyContext::new(seed);
    let mut results = Vec::new();
    for id in if only.is_empty() { (1..=14).collect() } else { only.to_vec() } {
        let r = verify(&ctx, &[id]).remove(0);
        println!("{r}");
        results.push(r);
    }
    let failed = results.iter().filter(|r| !r.pass).count();
    println!("{} passed, {failed} failed", results.len() - failed);
    let ext = c.format.ext();
    let body = match c.format {
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            for r in &results {
                w.serialize(r)?;
            }
            String::from_utf8(w.into_inner()?)?
        }
        Format::Jsonl => jsonl(&results)?,
    };
    write(out_dir(c)?.join(format!("acceptance_seed{seed}.{ext}")), &body)?;
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::from(1) })
}
