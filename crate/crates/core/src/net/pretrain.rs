//! Supervised pretraining on the clean source domain.
//!
//! The network is fitted to ground-truth depth with a relative L1 loss
//! `mean(|d - g| / g)`, Adam updates, and train-mode batch norm at batch
//! size one. Target-domain frames are never seen here.

use serde::{Deserialize, Serialize};

use super::{DepthNet, ForwardOptions, Track};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::scene::{DomainShift, Frame, SceneConfig, SceneStream};
use crate::tensor::{BnMode, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// First source frame index; step `k` trains on frame `first_frame + k`.
    pub first_frame: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 2000,
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            first_frame: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("pretrain lr {} must be non-negative", self.lr)));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0) {
            return Err(Error::Config("Adam betas must lie in [0, 1) and eps be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub steps: usize,
    /// Per-step training loss.
    pub losses: Vec<f64>,
}

impl PretrainReport {
    /// Mean loss over the last `n` steps.
    pub fn tail_mean(&self, n: usize) -> f64 {
        let tail = &self.losses[self.losses.len().saturating_sub(n)..];
        if tail.is_empty() {
            return f64::NAN;
        }
        tail.iter().sum::<f64>() / tail.len() as f64
    }
}

struct Adam<T> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    fn new(net: &DepthNet<T>) -> Self {
        let zeros = || net.params.entries().iter().map(|e| vec![T::zero(); e.tensor.numel()]).collect();
        Adam { m: zeros(), v: zeros(), t: 0 }
    }

    fn step(&mut self, net: &mut DepthNet<T>, grads: &[Vec<T>], cfg: &PretrainConfig) {
        self.t += 1;
        let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
        let c1 = T::one() - b1.powi(self.t);
        let c2 = T::one() - b2.powi(self.t);
        let (lr, eps) = (T::of(cfg.lr), T::of(cfg.eps));
        for (i, entry) in net.params.entries_mut().iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            for (k, w) in entry.tensor.data_mut().iter_mut().enumerate() {
                m[k] = b1 * m[k] + (T::one() - b1) * g[k];
                v[k] = b2 * v[k] + (T::one() - b2) * g[k] * g[k];
                *w -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
            }
        }
    }
}

fn frame_tensors<T: Scalar>(frame: &Frame) -> Result<(Tensor<T>, Tensor<T>)> {
    let gt = frame
        .gt_depth
        .as_ref()
        .ok_or_else(|| Error::Input(format!("source frame {} has no ground-truth depth", frame.index)))?;
    Ok((frame.image.cast(), gt.cast()))
}

/// Trains every parameter of `net` on clean frames of `scene`.
pub fn pretrain_on_source<T: Scalar>(
    net: &mut DepthNet<T>,
    scene: &SceneConfig,
    cfg: &PretrainConfig,
) -> Result<PretrainReport> {
    cfg.validate()?;
    scene.validate()?;
    let stream = SceneStream::new(scene.clone(), DomainShift::None, 0);
    let mut adam = Adam::new(net);
    let mut losses = Vec::with_capacity(cfg.steps);
    let opts = ForwardOptions {
        bn_mode: BnMode::Train,
        track: Track::All,
    };
    for step in 0..cfg.steps {
        let frame = stream.frame(cfg.first_frame + step)?;
        let (image, gt) = frame_tensors::<T>(&frame)?;
        let mut tape = Tape::new();
        let trace = net.forward_on_tape(&mut tape, &image, opts)?;
        let n = T::of(gt.numel() as f64);
        let inv_gt = gt.map(|g| T::one() / (g * n));
        let target = tape.constant(gt);
        let diff = tape.sub(trace.depth, target)?;
        let abs = tape.abs(diff);
        let w = tape.constant(inv_gt);
        let rel = tape.mul(abs, w)?;
        let loss_var = tape.sum(rel);
        let loss = tape.value(loss_var).item()?.as_f64();
        if !loss.is_finite() {
            return Err(Error::Training { step, loss });
        }
        let grads = tape.backward(loss_var)?;
        let g: Vec<Vec<T>> = trace.params.iter().map(|&p| grads.get_or_zeros(&tape, p)).collect();
        if g.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Training { step, loss });
        }
        adam.step(net, &g, cfg);
        net.update_running_stats(&trace);
        losses.push(loss);
    }
    Ok(PretrainReport {
        steps: cfg.steps,
        losses,
    })
}

/// Mean eval-mode AbsRel of `net` over `frames` clean source frames
/// starting at `first_frame`.
pub fn source_abs_rel<T: Scalar>(net: &DepthNet<T>, scene: &SceneConfig, first_frame: usize, frames: usize) -> Result<f64> {
    if frames == 0 {
        return Err(Error::Evaluation("no frames to evaluate".into()));
    }
    let stream = SceneStream::new(scene.clone(), DomainShift::None, 0);
    let mut total = 0.0;
    for t in first_frame..first_frame + frames {
        let frame = stream.frame(t)?;
        let (image, gt) = frame_tensors::<T>(&frame)?;
        let pred = net.forward(&image)?;
        let rel: f64 = pred
            .data()
            .iter()
            .zip(gt.data())
            .map(|(p, g)| ((*p - *g).abs() / *g).as_f64())
            .sum();
        total += rel / gt.numel() as f64;
    }
    Ok(total / frames as f64)
}
