//! Small U-Net style depth network with a selectively adaptable parameter
//! registry.
//!
//! Encoder level `l` is `conv3x3 (stride 1 at l = 0, else 2) -> BN -> ReLU`.
//! The decoder walks back up with `conv3x3 + bias -> ReLU -> 2x bilinear
//! upsample -> add skip`, and a `conv3x3 + bias -> sigmoid` head yields a
//! disparity `s` in (0, 1) mapped to depth by
//! `d = 1 / (1/max + s * (1/min - 1/max))`.

mod checkpoint;
mod params;
mod pretrain;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use params::{LayerKind, ParamEntry, ParameterStore, Part};
pub use pretrain::{pretrain_on_source, source_abs_rel, PretrainConfig, PretrainReport};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{BnMode, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DepthNetConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub encoder_channels: Vec<usize>,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub min_depth: f64,
    pub max_depth: f64,
}

impl Default for DepthNetConfig {
    fn default() -> Self {
        DepthNetConfig {
            height: 64,
            width: 64,
            channels: 3,
            encoder_channels: vec![16, 32, 64],
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            min_depth: 0.1,
            max_depth: 100.0,
        }
    }
}

impl DepthNetConfig {
    pub fn with_size(height: usize, width: usize) -> Self {
        DepthNetConfig {
            height,
            width,
            ..Default::default()
        }
    }

    pub fn levels(&self) -> usize {
        self.encoder_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_channels.is_empty() || self.encoder_channels.contains(&0) {
            return Err(Error::Config("encoder channels must be a non-empty list of positive ints".into()));
        }
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config("input size must be positive".into()));
        }
        if !(self.min_depth > 0.0 && self.min_depth < self.max_depth && self.max_depth.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 < min-depth < max-depth, got {} / {}",
                self.min_depth, self.max_depth
            )));
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("bn-eps must be positive and bn-momentum in [0, 1]".into()));
        }
        let div = 1usize << (self.levels() - 1);
        if self.height % div != 0 || self.width % div != 0 {
            return Err(Error::Config(format!(
                "input {}x{} not divisible by {div} ({} encoder levels)",
                self.height,
                self.width,
                self.levels()
            )));
        }
        Ok(())
    }
}

/// Per-channel running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

/// Which parameter leaves are recorded with `requires_grad`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Track {
    None,
    Adaptable,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOptions {
    pub bn_mode: BnMode,
    pub track: Track,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions {
            bn_mode: BnMode::Eval,
            track: Track::None,
        }
    }
}

/// Handles produced by [`DepthNet::forward_on_tape`].
pub struct ForwardTrace<T> {
    /// `[H, W]` depth map.
    pub depth: Var,
    /// One leaf per parameter store entry, in store order.
    pub params: Vec<Var>,
    /// Train-mode batch statistics per encoder level.
    pub bn_batch: Vec<Option<crate::tensor::BnBatchStats<T>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthNet<T> {
    config: DepthNetConfig,
    seed: u64,
    params: ParameterStore<T>,
    bn_stats: Vec<RunningStats<T>>,
}

pub(crate) fn enc_conv(l: usize) -> String {
    format!("enc{l}.conv.weight")
}
pub(crate) fn enc_gamma(l: usize) -> String {
    format!("enc{l}.bn.gamma")
}
pub(crate) fn enc_beta(l: usize) -> String {
    format!("enc{l}.bn.beta")
}
pub(crate) fn dec_weight(l: usize) -> String {
    format!("dec{l}.conv.weight")
}
pub(crate) fn dec_bias(l: usize) -> String {
    format!("dec{l}.conv.bias")
}
const HEAD_WEIGHT: &str = "head.conv.weight";
const HEAD_BIAS: &str = "head.conv.bias";

impl<T: Scalar> DepthNet<T> {
    /// Kaiming-normal convolution weights (std `sqrt(2 / fan_in)`), zero
    /// biases, and identity batch norm. Fully determined by `seed`.
    pub fn init_weights(config: DepthNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut kaiming = |k: usize, cin: usize, cout: usize| -> Tensor<T> {
            let std = (2.0 / (k * k * cin) as f64).sqrt();
            let dist = Normal::new(0.0, std).expect("finite std");
            Tensor::from_fn([k, k, cin, cout], |_| T::of(dist.sample(&mut rng)))
        };
        let ch = &config.encoder_channels;
        let levels = ch.len();
        let mut params = ParameterStore::new();
        let mut bn_stats = Vec::with_capacity(levels);
        let mut cin = config.channels;
        for (l, &c) in ch.iter().enumerate() {
            params.register(enc_conv(l), kaiming(3, cin, c), LayerKind::Conv, Part::Encoder, 2 * l);
            params.register(enc_gamma(l), Tensor::ones([c]), LayerKind::BnGamma, Part::Encoder, 2 * l + 1);
            params.register(enc_beta(l), Tensor::zeros([c]), LayerKind::BnBeta, Part::Encoder, 2 * l + 1);
            bn_stats.push(RunningStats {
                mean: Tensor::zeros([c]),
                var: Tensor::ones([c]),
            });
            cin = c;
        }
        let mut depth = 2 * levels;
        for l in (1..levels).rev() {
            params.register(dec_weight(l), kaiming(3, ch[l], ch[l - 1]), LayerKind::Conv, Part::Decoder, depth);
            params.register(dec_bias(l), Tensor::zeros([ch[l - 1]]), LayerKind::Conv, Part::Decoder, depth);
            depth += 1;
        }
        params.register(HEAD_WEIGHT, kaiming(3, ch[0], 1), LayerKind::Conv, Part::Decoder, depth);
        params.register(HEAD_BIAS, Tensor::zeros([1]), LayerKind::Conv, Part::Decoder, depth);
        Ok(DepthNet {
            config,
            seed,
            params,
            bn_stats,
        })
    }

    pub fn config(&self) -> &DepthNetConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParameterStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterStore<T> {
        &mut self.params
    }

    pub fn bn_stats(&self) -> &[RunningStats<T>] {
        &self.bn_stats
    }

    pub fn bn_stats_mut(&mut self) -> &mut [RunningStats<T>] {
        &mut self.bn_stats
    }

    /// Casts every parameter and statistic to another scalar type.
    pub fn cast<U: Scalar>(&self) -> DepthNet<U> {
        let mut params = ParameterStore::new();
        for e in self.params.entries() {
            params.register(e.name.clone(), e.tensor.cast(), e.kind, e.part, e.depth);
        }
        for (dst, src) in params.entries_mut().iter_mut().zip(self.params.entries()) {
            dst.adaptable = src.adaptable;
        }
        DepthNet {
            config: self.config.clone(),
            seed: self.seed,
            params,
            bn_stats: self
                .bn_stats
                .iter()
                .map(|s| RunningStats {
                    mean: s.mean.cast(),
                    var: s.var.cast(),
                })
                .collect(),
        }
    }

    pub fn check_image(&self, image: &Tensor<T>) -> Result<()> {
        let c = &self.config;
        if image.shape() != [c.height, c.width, c.channels] {
            return Err(Error::Input(format!(
                "image shape {:?} does not match network input [{}, {}, {}]",
                image.shape(),
                c.height,
                c.width,
                c.channels
            )));
        }
        if let Some(v) = image.data().iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
            return Err(Error::Input(format!("image value {v} outside [0, 1]")));
        }
        Ok(())
    }

    /// Records the forward pass on `tape`.
    pub fn forward_on_tape(&self, tape: &mut Tape<T>, image: &Tensor<T>, opts: ForwardOptions) -> Result<ForwardTrace<T>> {
        self.check_image(image)?;
        let cfg = &self.config;
        let params: Vec<Var> = self
            .params
            .entries()
            .iter()
            .map(|e| {
                let rg = match opts.track {
                    Track::None => false,
                    Track::Adaptable => e.adaptable,
                    Track::All => true,
                };
                tape.leaf(e.tensor.clone(), rg)
            })
            .collect();
        let p = |name: &str| -> Var {
            params[self.params.index_of(name).expect("registered parameter")]
        };
        let eps = T::of(cfg.bn_eps);
        let levels = cfg.levels();
        let mut x = tape.constant(image.clone());
        let mut skips = Vec::with_capacity(levels);
        let mut bn_batch = Vec::with_capacity(levels);
        for l in 0..levels {
            let stride = if l == 0 { 1 } else { 2 };
            let conv = tape.conv2d(x, p(&enc_conv(l)), None, stride, 1)?;
            let stats = &self.bn_stats[l];
            let fixed = match opts.bn_mode {
                BnMode::Eval => Some((stats.mean.data(), stats.var.data())),
                BnMode::Train => None,
            };
            let (bn, batch) = tape.batch_norm(conv, p(&enc_gamma(l)), p(&enc_beta(l)), fixed, eps)?;
            bn_batch.push(batch);
            x = tape.relu(bn);
            skips.push(x);
        }
        for l in (1..levels).rev() {
            let conv = tape.conv2d(x, p(&dec_weight(l)), Some(p(&dec_bias(l))), 1, 1)?;
            let act = tape.relu(conv);
            let up = tape.upsample(act, 2)?;
            x = tape.add(up, skips[l - 1])?;
        }
        let logits = tape.conv2d(x, p(HEAD_WEIGHT), Some(p(HEAD_BIAS)), 1, 1)?;
        let disp = tape.sigmoid(logits);
        let (inv_max, inv_min) = (1.0 / cfg.max_depth, 1.0 / cfg.min_depth);
        let scaled = tape.scale(disp, T::of(inv_min - inv_max));
        let inv_depth = tape.add_scalar(scaled, T::of(inv_max));
        let depth = tape.reciprocal(inv_depth);
        let depth = tape.clamp(depth, T::of(cfg.min_depth), T::of(cfg.max_depth));
        let depth = tape.reshape(depth, [cfg.height, cfg.width])?;
        Ok(ForwardTrace {
            depth,
            params,
            bn_batch,
        })
    }

    /// Eval-mode prediction: `[H, W]` depths in `[min-depth, max-depth]`.
    pub fn forward(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let trace = self.forward_on_tape(&mut tape, image, ForwardOptions::default())?;
        Ok(tape.value(trace.depth).clone())
    }

    /// Blends train-mode batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, trace: &ForwardTrace<T>) {
        let m = T::of(self.config.bn_momentum);
        for (stats, batch) in self.bn_stats.iter_mut().zip(&trace.bn_batch) {
            if let Some(b) = batch {
                crate::tensor::update_running_stats(
                    stats.mean.data_mut(),
                    stats.var.data_mut(),
                    &b.mean,
                    &b.var,
                    b.count,
                    m,
                );
            }
        }
    }
}
