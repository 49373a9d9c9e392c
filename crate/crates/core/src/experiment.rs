//! File-driven experiment configuration shared by the command-line tool and
//! the acceptance suite.
//!
//! A config is TOML (`.toml`) or JSON (any other extension). Every field has
//! a default; the defaults describe the reference foggy-stream experiment.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapt::{run_stream, Hyperparams, RunOptions, StreamRun};
use crate::error::{Error, Result};
use crate::eval::{EvalConfig, ReportHeader};
use crate::net::{pretrain_on_source, DepthNet, DepthNetConfig, PretrainConfig, PretrainReport};
use crate::scene::{load_frame_dir, DomainShift, Frame, SceneConfig, SceneStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamSource {
    /// Frames rendered on the fly from [`ExperimentConfig::scene`].
    #[default]
    Synthetic,
    /// Frames read from a directory written by `generate`.
    Directory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StreamConfig {
    pub source: StreamSource,
    pub frames: usize,
    /// First frame index of a synthetic stream.
    pub start: usize,
    /// Scene seed of the target stream; distinct from the source seed so the
    /// stream layouts are unseen during pretraining.
    pub seed: u64,
    #[serde(with = "shift_string")]
    pub domain_shift: DomainShift,
    pub dir: Option<PathBuf>,
    /// Manifest file name inside `dir`.
    pub manifest: Option<String>,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            source: StreamSource::Synthetic,
            frames: 500,
            start: 0,
            seed: 2,
            domain_shift: DomainShift::fog(0.05),
            dir: None,
            manifest: None,
        }
    }
}

mod shift_string {
    use super::DomainShift;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &DomainShift, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(v)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DomainShift, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Network initialisation seed.
    pub seed: u64,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub net: DepthNetConfig,
    pub pretrain: PretrainConfig,
    /// Source-domain scene; the target stream reuses it with `stream.seed`.
    pub scene: SceneConfig,
    pub stream: StreamConfig,
    pub hyper: Hyperparams,
    pub eval: EvalConfig,
    pub halt_on_error: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 7,
            checkpoint: None,
            out: None,
            net: DepthNetConfig::default(),
            pretrain: PretrainConfig::default(),
            scene: SceneConfig::with_size(64, 64, 1),
            stream: StreamConfig::default(),
            hyper: Hyperparams::default(),
            eval: EvalConfig::default(),
            halt_on_error: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parsed = if path.extension().is_some_and(|e| e == "toml") {
            Self::from_toml_str(&text)
        } else {
            Self::from_json_str(&text)
        };
        parsed.map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.pretrain.validate()?;
        self.scene.validate()?;
        self.hyper.validate()?;
        self.eval.validate()?;
        self.stream.domain_shift.validate()?;
        if (self.scene.height, self.scene.width) != (self.net.height, self.net.width) {
            return Err(Error::Config(format!(
                "scene resolution {}x{} differs from network input {}x{}",
                self.scene.height, self.scene.width, self.net.height, self.net.width
            )));
        }
        if self.stream.source == StreamSource::Directory && self.stream.dir.is_none() {
            return Err(Error::Config("directory stream needs `stream.dir`".into()));
        }
        Ok(())
    }

    pub fn run_options(&self) -> RunOptions {
        RunOptions {
            eval: self.eval.clone(),
            halt_on_error: self.halt_on_error,
        }
    }

    /// The synthetic target stream.
    pub fn scene_stream(&self) -> SceneStream {
        let scene = SceneConfig {
            seed: self.stream.seed,
            ..self.scene.clone()
        };
        let mut stream = SceneStream::new(scene, self.stream.domain_shift.clone(), self.stream.frames);
        stream.start = self.stream.start;
        stream
    }

    /// Frames of the configured target stream, synthetic or on disk.
    pub fn frames(&self) -> Result<Box<dyn Iterator<Item = Result<Frame>>>> {
        match self.stream.source {
            StreamSource::Synthetic => Ok(Box::new(self.scene_stream().into_iter())),
            StreamSource::Directory => {
                let dir = self.stream.dir.as_deref().ok_or_else(|| Error::Config("missing `stream.dir`".into()))?;
                let frames = load_frame_dir(dir, self.stream.manifest.as_deref())?;
                Ok(Box::new(frames.take(self.stream.frames)))
            }
        }
    }

    /// A freshly initialised network.
    pub fn init_net(&self) -> Result<DepthNet<f32>> {
        DepthNet::init_weights(self.net.clone(), self.seed)
    }

    /// Initialises and pretrains a network on the clean source scene.
    pub fn pretrain_net(&self) -> Result<(DepthNet<f32>, PretrainReport)> {
        let mut net = self.init_net()?;
        let report = pretrain_on_source(&mut net, &self.scene, &self.pretrain)?;
        Ok((net, report))
    }

    /// Runs the online protocol on a copy of `net`, returning the adapted
    /// network and the run record.
    pub fn adapt(&self, net: &DepthNet<f32>) -> Result<(DepthNet<f32>, StreamRun)> {
        let mut net = net.clone();
        let run = run_stream(&mut net, self.frames()?, &self.hyper, &self.run_options())?;
        Ok((net, run))
    }

    pub fn report_header(&self, timestamp: impl Into<String>) -> ReportHeader {
        ReportHeader::new(timestamp, serde_json::to_value(self).unwrap_or(serde_json::Value::Null))
    }
}
