//! Online test-time adaptation: losses, parameter selection, the per-frame
//! update and the evaluate-then-adapt stream loop.

mod loss;
mod selection;

pub use loss::{
    depth_refining_loss, depth_refining_loss_on_tape, edge_guided_loss, edge_guided_loss_on_tape, total_loss,
    DepthLossNorm, Lambda,
};
pub use selection::{resolve_selection, SelectionSpec};

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{compute_metrics, EvalConfig, MetricRecord};
use crate::net::{DepthNet, ForwardOptions, Track};
use crate::scalar::Scalar;
use crate::scene::{dynamic_labels, Frame};
use crate::segmentation::{extract_instance_masks, oracle_panoptic, InstanceMaskSet, OracleConfig};
use crate::signal::{
    edge_map, edge_map_on_tape, gray_mean, mask_depth, mask_depth_on_tape, median_filter_masked, EdgeMap,
    MedianConfig, MedianSupport, WeightMode,
};
use crate::tensor::{BnMode, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    pub lambda: Lambda,
    /// SGD learning rate α.
    pub lr: f64,
    pub median_window: usize,
    pub median_support: MedianSupport,
    pub weight_mode: WeightMode,
    pub depth_loss: DepthLossNorm,
    pub steps_per_frame: usize,
    pub selection: SelectionSpec,
    pub dynamic_labels: Vec<String>,
    /// Instances with fewer visible pixels are ignored.
    pub min_instance_area: usize,
    pub segmenter: OracleConfig,
    /// Batch-norm statistics used for prediction and adaptation.
    pub bn_mode: BnMode,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            lambda: Lambda::default(),
            lr: 1e-6,
            median_window: 5,
            median_support: MedianSupport::FullWindow,
            weight_mode: WeightMode::default(),
            depth_loss: DepthLossNorm::L1,
            steps_per_frame: 1,
            selection: SelectionSpec::BnEncoderAll,
            dynamic_labels: dynamic_labels(),
            min_instance_area: 16,
            segmenter: OracleConfig::default(),
            bn_mode: BnMode::Eval,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        self.lambda.validate()?;
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be non-negative", self.lr)));
        }
        self.median()?;
        self.weight_mode.validate()?;
        self.selection.validate()?;
        self.segmenter.validate()?;
        if self.steps_per_frame == 0 {
            return Err(Error::Config("steps per frame must be positive".into()));
        }
        Ok(())
    }

    pub fn median(&self) -> Result<MedianConfig> {
        Ok(MedianConfig::new(self.median_window)?.with_support(self.median_support))
    }
}

/// Everything about a frame that does not depend on the network.
#[derive(Clone, Debug)]
pub struct FrameInputs<T> {
    pub index: usize,
    pub image: Tensor<T>,
    pub masks: InstanceMaskSet,
    /// `∂I`, the weighted edge map of the channel-mean image.
    pub image_edges: EdgeMap<T>,
}

pub fn prepare_frame<T: Scalar>(frame: &Frame, hyper: &Hyperparams) -> Result<FrameInputs<T>> {
    let image: Tensor<T> = frame.image.cast();
    let panoptic = oracle_panoptic(&frame.panoptic, frame.index, &hyper.segmenter)?;
    let masks = extract_instance_masks(&panoptic, &hyper.dynamic_labels).retain_min_area(hyper.min_instance_area);
    let gray = gray_mean(&image)?;
    let image_edges = edge_map(&gray, &hyper.weight_mode.weights(&gray)?)?;
    Ok(FrameInputs {
        index: frame.index,
        image,
        masks,
        image_edges,
    })
}

/// Quantities derived from the current prediction and held fixed while
/// differentiating: median pseudo-labels and the depth edge weights `V`.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets<T> {
    pub pseudo_labels: Vec<Tensor<T>>,
    pub depth_weights: Tensor<T>,
}

pub fn compute_targets<T: Scalar>(depth: &Tensor<T>, masks: &InstanceMaskSet, hyper: &Hyperparams) -> Result<Targets<T>> {
    let median = hyper.median()?;
    let pseudo_labels = mask_depth(depth, masks)?
        .iter()
        .enumerate()
        .map(|(j, m)| median_filter_masked(m, masks.mask(j), &median))
        .collect::<Result<_>>()?;
    Ok(Targets {
        pseudo_labels,
        depth_weights: hyper.weight_mode.weights(depth)?,
    })
}

/// Loss nodes recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LossGraph {
    pub instances: usize,
    pub depth: Option<Var>,
    pub edge: Var,
    pub total: Var,
    /// False when the total loss does not depend on the network.
    pub differentiable: bool,
}

/// Records `L_d`, `L_e` and `L` for the depth node `depth`.
pub fn build_loss<T: Scalar>(
    tape: &mut Tape<T>,
    depth: Var,
    inputs: &FrameInputs<T>,
    targets: &Targets<T>,
    hyper: &Hyperparams,
) -> Result<LossGraph> {
    hyper.lambda.validate()?;
    let masked = mask_depth_on_tape(tape, depth, &inputs.masks)?;
    let loss_depth = depth_refining_loss_on_tape(tape, &masked, &targets.pseudo_labels, hyper.depth_loss)?;
    let depth_edges = edge_map_on_tape(tape, depth, &targets.depth_weights)?;
    let edge = edge_guided_loss_on_tape(tape, &inputs.image_edges.values, depth_edges)?;
    let (total, differentiable) = match (hyper.lambda, loss_depth) {
        (Lambda::Infinite, _) => (edge, true),
        (l, Some(d)) if l.is_zero() => (d, true),
        (l, None) if l.is_zero() => (tape.constant(Tensor::scalar(T::zero())), false),
        (Lambda::Finite(v), Some(d)) => {
            let e = tape.scale(edge, T::of(v));
            (tape.add(d, e)?, true)
        }
        (Lambda::Finite(v), None) => (tape.scale(edge, T::of(v)), true),
    };
    Ok(LossGraph {
        instances: inputs.masks.len(),
        depth: loss_depth,
        edge,
        total,
        differentiable,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub frame: usize,
    pub domain: String,
    pub instances: usize,
    pub loss_depth: f64,
    pub loss_edge: f64,
    pub loss_total: f64,
    pub lambda: Lambda,
    /// L2 norm of `∇_θ L`; absent when no gradient was taken.
    pub grad_norm: Option<f64>,
    pub update_applied: bool,
    pub nonfinite: bool,
    /// Excluded from serialized reports so they stay reproducible.
    #[serde(skip)]
    pub wall_time: Duration,
}

/// One inner optimisation step; returns the loss values, gradient norm,
/// whether θ changed, and the prediction made before the update.
struct InnerStep<T> {
    losses: (f64, f64, f64),
    grad_norm: Option<f64>,
    applied: bool,
    nonfinite: bool,
    prediction: Tensor<T>,
}

fn inner_step<T: Scalar>(net: &mut DepthNet<T>, inputs: &FrameInputs<T>, hyper: &Hyperparams) -> Result<InnerStep<T>> {
    let mut tape = Tape::new();
    let train = hyper.lr > 0.0 && net.params().adaptable_scalars() > 0;
    let opts = ForwardOptions {
        bn_mode: hyper.bn_mode,
        track: if train { Track::Adaptable } else { Track::None },
    };
    let trace = net.forward_on_tape(&mut tape, &inputs.image, opts)?;
    let prediction = tape.value(trace.depth).clone();
    let targets = compute_targets(&prediction, &inputs.masks, hyper)?;
    let graph = build_loss(&mut tape, trace.depth, inputs, &targets, hyper)?;
    let value = |v: Var| tape.value(v).item().map(|x| x.as_f64());
    let losses = (
        graph.depth.map(value).transpose()?.unwrap_or(0.0),
        value(graph.edge)?,
        value(graph.total)?,
    );
    let mut step = InnerStep {
        losses,
        grad_norm: None,
        applied: false,
        nonfinite: !(losses.0.is_finite() && losses.1.is_finite() && losses.2.is_finite()),
        prediction,
    };
    if step.nonfinite || !train || !graph.differentiable {
        return Ok(step);
    }
    let grads = tape.backward(graph.total)?;
    let mut updates = Vec::new();
    let mut sq = 0.0;
    for (i, entry) in net.params().entries().iter().enumerate() {
        if entry.adaptable {
            let g = grads.get_or_zeros(&tape, trace.params[i]);
            sq += g.iter().map(|v| v.as_f64().powi(2)).sum::<f64>();
            updates.push((i, g));
        }
    }
    step.grad_norm = Some(sq.sqrt());
    if !sq.is_finite() {
        step.nonfinite = true;
        return Ok(step);
    }
    let lr = T::of(hyper.lr);
    let entries = net.params_mut().entries_mut();
    for (i, g) in updates {
        for (w, gv) in entries[i].tensor.data_mut().iter_mut().zip(g) {
            *w -= lr * gv;
        }
    }
    step.applied = true;
    Ok(step)
}

fn adapt_frame<T: Scalar>(net: &mut DepthNet<T>, frame: &Frame, hyper: &Hyperparams) -> Result<(StepReport, Tensor<T>)> {
    hyper.validate()?;
    let start = Instant::now();
    let inputs = prepare_frame(frame, hyper)?;
    let first = inner_step(net, &inputs, hyper)?;
    let mut applied = first.applied;
    if first.applied {
        for _ in 1..hyper.steps_per_frame {
            let s = inner_step(net, &inputs, hyper)?;
            applied |= s.applied;
            if !s.applied {
                break;
            }
        }
    }
    let (ld, le, l) = first.losses;
    let report = StepReport {
        frame: frame.index,
        domain: frame.domain.clone(),
        instances: inputs.masks.len(),
        loss_depth: ld,
        loss_edge: le,
        loss_total: l,
        lambda: hyper.lambda,
        grad_norm: first.grad_norm,
        update_applied: applied,
        nonfinite: first.nonfinite,
        wall_time: start.elapsed(),
    };
    Ok((report, first.prediction))
}

/// Adapts the currently adaptable parameters of `net` on one frame with
/// `θ ← θ − α ∇_θ L`. Parameters outside θ are never written.
///
/// A non-finite loss or gradient leaves θ untouched and sets
/// [`StepReport::nonfinite`].
pub fn adapt_step<T: Scalar>(net: &mut DepthNet<T>, frame: &Frame, hyper: &Hyperparams) -> Result<StepReport> {
    adapt_frame(net, frame, hyper).map(|(r, _)| r)
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunOptions {
    pub eval: EvalConfig,
    /// Stop at the first failing frame instead of recording and skipping it.
    pub halt_on_error: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamStep {
    pub report: StepReport,
    /// Metrics of the prediction made before this frame's update.
    pub metrics: Option<MetricRecord>,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct StreamRun {
    pub steps: Vec<StreamStep>,
    pub selected: Vec<String>,
    pub adapted_scalars: usize,
    pub skipped: Vec<SkippedFrame>,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedFrame {
    pub position: usize,
    pub reason: String,
}

impl StreamRun {
    pub fn metrics(&self) -> Vec<MetricRecord> {
        self.steps.iter().filter_map(|s| s.metrics.clone()).collect()
    }

    pub fn reports(&self) -> impl Iterator<Item = &StepReport> {
        self.steps.iter().map(|s| &s.report)
    }
}

/// Runs the online protocol over `frames`: each frame is evaluated with the
/// current parameters, then used for adaptation. θ is resolved from
/// `hyper.selection` before the first frame.
pub fn run_stream<T, I>(net: &mut DepthNet<T>, frames: I, hyper: &Hyperparams, opts: &RunOptions) -> Result<StreamRun>
where
    T: Scalar,
    I: IntoIterator<Item = Result<Frame>>,
{
    hyper.validate()?;
    opts.eval.validate()?;
    let mut run = StreamRun {
        selected: resolve_selection(&hyper.selection, net.params_mut())?,
        adapted_scalars: net.params().adaptable_scalars(),
        ..Default::default()
    };
    if run.selected.is_empty() && hyper.lr > 0.0 {
        run.warnings.push(format!("selection `{}` is empty; nothing will adapt", hyper.selection));
    }
    for (position, frame) in frames.into_iter().enumerate() {
        let outcome = frame.and_then(|f| {
            let (report, pred) = adapt_frame(net, &f, hyper)?;
            let metrics = f
                .gt_depth
                .as_ref()
                .map(|gt| compute_metrics(&pred, &gt.cast(), None, &opts.eval, &f.domain))
                .transpose()?;
            Ok(StreamStep { report, metrics })
        });
        match outcome {
            Ok(step) => run.steps.push(step),
            Err(e) if opts.halt_on_error => {
                return Err(Error::Frame {
                    index: position,
                    source: Box::new(e),
                })
            }
            Err(e) => run.skipped.push(SkippedFrame {
                position,
                reason: e.to_string(),
            }),
        }
    }
    Ok(run)
}
