//! Report files written for a finished stream run.
//!
//! * `summary.csv`: one row per domain tag plus `all`, columns
//!   `domain,frames,valid,abs_rel,sq_rel,rmse,rmse_log,delta1,delta2,delta3`.
//! * `steps.jsonl`: a [`ReportHeader`] line, then one [`StreamStep`] object
//!   per frame. The header holds the only timestamp.
//! * `series.csv`: per-frame losses and metrics for plotting against frame
//!   index.
//!
//! Sweep tables go through [`write_sweep_csv`] with columns
//! `<key>,adapted_scalars,abs_rel,...`.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{aggregate_by_domain, Aggregation, MetricRecord, SweepRow};
use crate::adapt::{StreamRun, StreamStep};
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;
pub const STEPS_SCHEMA: &str = "pitta-steps";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const STEPS_FILE: &str = "steps.jsonl";
pub const SERIES_FILE: &str = "series.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportHeader {
    pub schema: String,
    pub version: u32,
    pub timestamp: String,
    /// Free-form run description, typically the experiment configuration.
    pub config: serde_json::Value,
    /// Resolved adapted parameter names; filled in by [`emit_report`].
    #[serde(default)]
    pub selected: Vec<String>,
    #[serde(default)]
    pub adapted_scalars: usize,
}

impl ReportHeader {
    pub fn new(timestamp: impl Into<String>, config: serde_json::Value) -> Self {
        ReportHeader {
            schema: STEPS_SCHEMA.into(),
            version: SCHEMA_VERSION,
            timestamp: timestamp.into(),
            config,
            selected: Vec::new(),
            adapted_scalars: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub domain: String,
    pub frames: usize,
    pub valid: usize,
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

impl SummaryRow {
    fn new(frames: usize, m: &MetricRecord) -> Self {
        SummaryRow {
            domain: m.domain.clone(),
            frames,
            valid: m.valid,
            abs_rel: m.abs_rel,
            sq_rel: m.sq_rel,
            rmse: m.rmse,
            rmse_log: m.rmse_log,
            delta1: m.delta1,
            delta2: m.delta2,
            delta3: m.delta3,
        }
    }

    pub fn record(&self) -> MetricRecord {
        MetricRecord {
            abs_rel: self.abs_rel,
            sq_rel: self.sq_rel,
            rmse: self.rmse,
            rmse_log: self.rmse_log,
            delta1: self.delta1,
            delta2: self.delta2,
            delta3: self.delta3,
            valid: self.valid,
            domain: self.domain.clone(),
        }
    }
}

#[derive(Serialize)]
struct SeriesRow<'a> {
    frame: usize,
    domain: &'a str,
    instances: usize,
    loss_depth: f64,
    loss_edge: f64,
    loss_total: f64,
    update_applied: bool,
    abs_rel: Option<f64>,
    rmse: Option<f64>,
    delta1: Option<f64>,
}

#[derive(Serialize)]
struct SweepCsvRow<'a> {
    setting: &'a str,
    adapted_scalars: usize,
    abs_rel: f64,
    sq_rel: f64,
    rmse: f64,
    rmse_log: f64,
    delta1: f64,
    delta2: f64,
    delta3: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportFiles {
    pub summary: PathBuf,
    pub steps: PathBuf,
    pub series: PathBuf,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        other => Error::Ingest {
            path: path.to_path_buf(),
            offset: None,
            reason: format!("{other:?}"),
        },
    }
}

fn summary_rows(run: &StreamRun, rule: Aggregation) -> Vec<SummaryRow> {
    let metrics = run.metrics();
    let mut frames: BTreeMap<&str, usize> = BTreeMap::new();
    for m in &metrics {
        *frames.entry(&m.domain).or_default() += 1;
    }
    aggregate_by_domain(&metrics, rule)
        .values()
        .map(|m| {
            let n = if m.domain == "all" { metrics.len() } else { frames[m.domain.as_str()] };
            SummaryRow::new(n, m)
        })
        .collect()
}

fn write_csv<S: Serialize>(path: &Path, header: &[&str], rows: impl IntoIterator<Item = S>) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes the summary, step log and plot series for `run` into `dir`.
pub fn emit_report(dir: &Path, run: &StreamRun, header: &ReportHeader, rule: Aggregation) -> Result<ReportFiles> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = ReportFiles {
        summary: dir.join(SUMMARY_FILE),
        steps: dir.join(STEPS_FILE),
        series: dir.join(SERIES_FILE),
    };
    write_csv(
        &files.summary,
        &["domain", "frames", "valid", "abs_rel", "sq_rel", "rmse", "rmse_log", "delta1", "delta2", "delta3"],
        summary_rows(run, rule),
    )?;

    let header = ReportHeader {
        selected: run.selected.clone(),
        adapted_scalars: run.adapted_scalars,
        ..header.clone()
    };
    write_jsonl(&files.steps, &header, &run.steps)?;
    write_csv(
        &files.series,
        &[
            "frame", "domain", "instances", "loss_depth", "loss_edge", "loss_total", "update_applied", "abs_rel",
            "rmse", "delta1",
        ],
        run.steps.iter().map(|s| SeriesRow {
            frame: s.report.frame,
            domain: &s.report.domain,
            instances: s.report.instances,
            loss_depth: s.report.loss_depth,
            loss_edge: s.report.loss_edge,
            loss_total: s.report.loss_total,
            update_applied: s.report.update_applied,
            abs_rel: s.metrics.as_ref().map(|m| m.abs_rel),
            rmse: s.metrics.as_ref().map(|m| m.rmse),
            delta1: s.metrics.as_ref().map(|m| m.delta1),
        }),
    )?;
    Ok(files)
}

fn write_jsonl(path: &Path, header: &ReportHeader, steps: &[StreamStep]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    let json = |e: serde_json::Error| Error::Numeric(format!("cannot serialize report: {e}"));
    writeln!(out, "{}", serde_json::to_string(header).map_err(json)?).map_err(|e| Error::io(path, e))?;
    for step in steps {
        writeln!(out, "{}", serde_json::to_string(step).map_err(json)?).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Parses a `summary.csv` written by [`emit_report`].
pub fn read_summary_csv(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

/// Parses a `steps.jsonl` written by [`emit_report`] back into its header and
/// a run holding the recorded steps.
pub fn read_steps_jsonl(path: &Path) -> Result<(ReportHeader, StreamRun)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut offset = 0u64;
    let mut header = None;
    let mut run = StreamRun::default();
    for line in text.split_inclusive('\n') {
        let body = line.trim_end();
        let bad = |e: serde_json::Error| Error::Ingest {
            path: path.to_path_buf(),
            offset: Some(offset),
            reason: e.to_string(),
        };
        if !body.is_empty() {
            if header.is_none() {
                let h: ReportHeader = serde_json::from_str(body).map_err(bad)?;
                if h.schema != STEPS_SCHEMA || h.version > SCHEMA_VERSION {
                    return Err(Error::Ingest {
                        path: path.to_path_buf(),
                        offset: Some(0),
                        reason: format!("unsupported schema {} v{}", h.schema, h.version),
                    });
                }
                header = Some(h);
            } else {
                run.steps.push(serde_json::from_str(body).map_err(bad)?);
            }
        }
        offset += line.len() as u64;
    }
    let header = header.ok_or_else(|| Error::Ingest {
        path: path.to_path_buf(),
        offset: Some(0),
        reason: "missing header line".into(),
    })?;
    run.selected = header.selected.clone();
    run.adapted_scalars = header.adapted_scalars;
    Ok((header, run))
}

/// Writes an ablation table; `key` names the swept column.
pub fn write_sweep_csv(path: &Path, key: &str, rows: &[SweepRow]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    write_csv(
        path,
        &[key, "adapted_scalars", "abs_rel", "sq_rel", "rmse", "rmse_log", "delta1", "delta2", "delta3"],
        rows.iter().map(|r| SweepCsvRow {
            setting: &r.setting,
            adapted_scalars: r.adapted_scalars,
            abs_rel: r.summary.abs_rel,
            sq_rel: r.summary.sq_rel,
            rmse: r.summary.rmse,
            rmse_log: r.summary.rmse_log,
            delta1: r.summary.delta1,
            delta2: r.summary.delta2,
            delta3: r.summary.delta3,
        }),
    )
}
