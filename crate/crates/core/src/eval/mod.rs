//! Depth metrics, stream aggregation, ablation sweeps and report files.

mod metrics;
mod report;
mod sweep;

pub use metrics::{aggregate, aggregate_by_domain, compute_metrics, Aggregation, EvalConfig, MetricRecord, MIN_EVAL_DEPTH};
pub use report::{
    emit_report, read_steps_jsonl, read_summary_csv, write_sweep_csv, ReportFiles, ReportHeader, SummaryRow, STEPS_FILE, STEPS_SCHEMA,
    SCHEMA_VERSION, SERIES_FILE, SUMMARY_FILE,
};
pub use sweep::{sweep_lambda, sweep_selection, SweepRow};
