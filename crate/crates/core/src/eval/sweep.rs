use serde::{Deserialize, Serialize};

use super::{aggregate, MetricRecord};
use crate::adapt::{run_stream, Hyperparams, Lambda, RunOptions, SelectionSpec};
use crate::error::{Error, Result};
use crate::net::DepthNet;
use crate::scalar::Scalar;
use crate::scene::Frame;

/// One cell of an ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// The swept value in its string form.
    pub setting: String,
    pub adapted_scalars: usize,
    pub summary: MetricRecord,
}

fn run_cell<T, I>(net: &DepthNet<T>, frames: I, hyper: &Hyperparams, opts: &RunOptions, setting: String) -> Result<SweepRow>
where
    T: Scalar,
    I: IntoIterator<Item = Result<Frame>>,
{
    let mut net = net.clone();
    let run = run_stream(&mut net, frames, hyper, opts)?;
    let summary = aggregate(&run.metrics(), opts.eval.aggregation, "all")
        .ok_or_else(|| Error::Evaluation(format!("sweep cell `{setting}` produced no metrics")))?;
    Ok(SweepRow {
        setting,
        adapted_scalars: run.adapted_scalars,
        summary,
    })
}

/// One full stream run per λ, each from a fresh copy of `net` and a fresh
/// stream from `frames`.
pub fn sweep_lambda<T, I, F>(
    net: &DepthNet<T>,
    frames: F,
    base: &Hyperparams,
    opts: &RunOptions,
    grid: &[Lambda],
) -> Result<Vec<SweepRow>>
where
    T: Scalar,
    I: IntoIterator<Item = Result<Frame>>,
    F: Fn() -> I,
{
    if grid.is_empty() {
        return Err(Error::Config("lambda grid is empty".into()));
    }
    grid.iter()
        .map(|&lambda| {
            let hyper = Hyperparams { lambda, ..base.clone() };
            run_cell(net, frames(), &hyper, opts, lambda.to_string())
        })
        .collect()
}

/// One full stream run per parameter selection.
pub fn sweep_selection<T, I, F>(
    net: &DepthNet<T>,
    frames: F,
    base: &Hyperparams,
    opts: &RunOptions,
    grid: &[SelectionSpec],
) -> Result<Vec<SweepRow>>
where
    T: Scalar,
    I: IntoIterator<Item = Result<Frame>>,
    F: Fn() -> I,
{
    if grid.is_empty() {
        return Err(Error::Config("selection grid is empty".into()));
    }
    grid.iter()
        .map(|spec| {
            let hyper = Hyperparams {
                selection: spec.clone(),
                ..base.clone()
            };
            run_cell(net, frames(), &hyper, opts, spec.to_string())
        })
        .collect()
}
