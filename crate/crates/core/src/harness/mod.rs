//! Experiment runner: closed-loop simulation, experiment suite, reports and
//! the acceptance checks.

pub mod experiments;
pub mod report;
pub mod sim;
pub mod verify;

pub use experiments::{run_experiment, Experiment, ExperimentName, ExperimentOutput, MetricSamples};
pub use sim::{closed_loop_corruption, operator_force, run, OperatorParams, RunLog, RunSummary, Script, SimConfig, StepRecord};
pub use verify::{check, verify, CriterionResult, VerifyContext, CRITERIA};
pub use report::{aggregate, report, samples_csv, steps_csv, steps_jsonl, summary_csv, summary_json, SummaryRow};
