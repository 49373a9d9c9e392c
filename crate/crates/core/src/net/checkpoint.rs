//! Binary checkpoint format (all integers and floats little-endian):
//!
//! ```text
//! magic          11 bytes  "PITTA-CKPT\0"
//! version        u32
//! config block   u32 height, u32 width, u32 channels,
//!                u32 levels, levels x u32 encoder channels,
//!                f64 bn_eps, f64 bn_momentum, f64 min_depth, f64 max_depth,
//!                u64 seed
//! entry count    u32
//! per entry      u32 name length, UTF-8 name,
//!                u32 rank, rank x u32 dims,
//!                product(dims) x f32 values
//! ```
//!
//! Entries are the parameter store in registration order followed by the
//! batch-norm running statistics (`enc{l}.bn.running_mean`,
//! `enc{l}.bn.running_var`). A JSON sidecar (`<path>.json`) repeats the
//! config, seed and entry shapes for inspection; it is never read back.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{DepthNet, DepthNetConfig, RunningStats};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 11] = b"PITTA-CKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

fn running_names(l: usize) -> (String, String) {
    (format!("enc{l}.bn.running_mean"), format!("enc{l}.bn.running_var"))
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

#[derive(Serialize)]
struct Sidecar<'a> {
    format: &'static str,
    version: u32,
    seed: u64,
    config: &'a DepthNetConfig,
    entries: Vec<(String, Vec<usize>)>,
}

pub fn save_checkpoint<T: Scalar>(net: &DepthNet<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let cfg = net.config();
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut buf, CHECKPOINT_VERSION);
    for v in [cfg.height, cfg.width, cfg.channels, cfg.levels()] {
        put_u32(&mut buf, v as u32);
    }
    for &c in &cfg.encoder_channels {
        put_u32(&mut buf, c as u32);
    }
    for v in [cfg.bn_eps, cfg.bn_momentum, cfg.min_depth, cfg.max_depth] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&net.seed().to_le_bytes());

    let mut entries: Vec<(String, &Tensor<T>)> = net
        .params()
        .entries()
        .iter()
        .map(|e| (e.name.clone(), &e.tensor))
        .collect();
    for (l, s) in net.bn_stats().iter().enumerate() {
        let (m, v) = running_names(l);
        entries.push((m, &s.mean));
        entries.push((v, &s.var));
    }
    put_u32(&mut buf, entries.len() as u32);
    for (name, t) in &entries {
        put_u32(&mut buf, name.len() as u32);
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, t.shape().len() as u32);
        for &d in t.shape() {
            put_u32(&mut buf, d as u32);
        }
        for v in t.data() {
            buf.extend_from_slice(&v.as_f32().to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, &buf).map_err(|e| Error::io(path, e))?;

    let sidecar = Sidecar {
        format: "pitta-checkpoint",
        version: CHECKPOINT_VERSION,
        seed: net.seed(),
        config: cfg,
        entries: entries.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect(),
    };
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::Numeric(e.to_string()))?;
    fs::write(&side, json + "\n").map_err(|e| Error::io(side, e))
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, reason: impl Into<String>) -> Error {
        Error::ingest(self.path, Some(self.pos as u64), reason)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!("truncated: need {n} more bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<DepthNet<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        path,
        bytes: &bytes,
        pos: 0,
    };
    if r.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
        r.pos = 0;
        return Err(r.err("bad magic"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        r.pos -= 4;
        return Err(r.err(format!("unsupported version {version}")));
    }
    let height = r.u32()? as usize;
    let width = r.u32()? as usize;
    let channels = r.u32()? as usize;
    let levels = r.u32()? as usize;
    if levels > 64 {
        return Err(r.err(format!("implausible level count {levels}")));
    }
    let encoder_channels = (0..levels).map(|_| r.u32().map(|c| c as usize)).collect::<Result<Vec<_>>>()?;
    let config = DepthNetConfig {
        height,
        width,
        channels,
        encoder_channels,
        bn_eps: r.f64()?,
        bn_momentum: r.f64()?,
        min_depth: r.f64()?,
        max_depth: r.f64()?,
    };
    let seed = r.u64()?;
    let config_end = r.pos;
    let mut net = DepthNet::<T>::init_weights(config, seed)
        .map_err(|e| Error::ingest(path, Some(config_end as u64), format!("invalid config block: {e}")))?;

    let count = r.u32()? as usize;
    let expected = net.params().len() + 2 * net.bn_stats().len();
    if count != expected {
        return Err(r.err(format!("{count} entries, expected {expected}")));
    }
    let mut seen = vec![false; expected];
    for _ in 0..count {
        let start = r.pos;
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| Error::ingest(path, Some(start as u64), "entry name is not UTF-8"))?
            .to_owned();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4)?;
        let data: Vec<T> = raw
            .chunks_exact(4)
            .map(|b| T::of(f32::from_le_bytes(b.try_into().unwrap()) as f64))
            .collect();
        let (slot, target) = locate(&mut net, &name).ok_or_else(|| {
            Error::ingest(path, Some(start as u64), format!("unknown entry {name:?}"))
        })?;
        if target.shape() != shape.as_slice() {
            return Err(Error::ingest(
                path,
                Some(start as u64),
                format!("{name}: shape {shape:?}, expected {:?}", target.shape()),
            ));
        }
        target.data_mut().copy_from_slice(&data);
        seen[slot] = true;
    }
    if r.pos != bytes.len() {
        return Err(r.err("trailing bytes"));
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(Error::ingest(path, None, format!("missing entry #{i}")));
    }
    Ok(net)
}

fn locate<'n, T: Scalar>(net: &'n mut DepthNet<T>, name: &str) -> Option<(usize, &'n mut Tensor<T>)> {
    let np = net.params().len();
    if let Some(i) = net.params().index_of(name) {
        return Some((i, &mut net.params_mut().entries_mut()[i].tensor));
    }
    let levels = net.bn_stats().len();
    (0..levels).find_map(|l| {
        let (m, v) = running_names(l);
        if name == m {
            Some(l * 2)
        } else if name == v {
            Some(l * 2 + 1)
        } else {
            None
        }
    })
    .map(move |k| {
        let RunningStats { mean, var } = &mut net.bn_stats_mut()[k / 2];
        (np + k, if k % 2 == 0 { mean } else { var })
    })
}
