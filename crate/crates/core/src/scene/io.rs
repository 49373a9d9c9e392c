//! Frame directories: a JSON manifest enumerating per-frame files.
//!
//! * image: 8-bit RGB PNG
//! * depth: single-channel PFM (`Pf`, float32), optional
//! * panoptic: 16-bit grayscale PNG, `label << 8 | instance`
//!
//! ```json
//! { "format": "pitta-frames", "version": 1, "height": 64, "width": 64,
//!   "labels": { "1": "ground", "4": "car" },
//!   "frames": [ { "index": 0, "image": "000000.png", "depth": "000000.pfm",
//!                 "panoptic": "000000_pan.png", "domain": "foggy" } ] }
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Frame;
use crate::error::{Error, Result};
use crate::segmentation::PanopticMask;
use crate::tensor::Tensor;

pub const MANIFEST_NAME: &str = "manifest.json";
const MANIFEST_FORMAT: &str = "pitta-frames";
const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameManifest {
    pub format: String,
    pub version: u32,
    pub height: usize,
    pub width: usize,
    pub labels: BTreeMap<u16, String>,
    pub frames: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<String>,
    pub panoptic: String,
    #[serde(default = "default_domain")]
    pub domain: String,
}

fn default_domain() -> String {
    "unknown".to_owned()
}

/// Writes `frames` plus a manifest into `dir` (created if needed).
pub fn write_frame_dir<'a>(frames: impl IntoIterator<Item = &'a Frame>, dir: impl AsRef<Path>) -> Result<FrameManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = FrameManifest {
        format: MANIFEST_FORMAT.to_owned(),
        version: MANIFEST_VERSION,
        height: 0,
        width: 0,
        labels: BTreeMap::new(),
        frames: Vec::new(),
    };
    for f in frames {
        let (h, w) = (f.height(), f.width());
        if manifest.frames.is_empty() {
            manifest.height = h;
            manifest.width = w;
            manifest.labels = f.panoptic.label_names().clone();
        } else if (h, w) != (manifest.height, manifest.width) {
            return Err(Error::Input(format!("frame {} is {h}x{w}, stream is {}x{}", f.index, manifest.height, manifest.width)));
        }
        let stem = format!("{:06}", f.index);
        let entry = ManifestEntry {
            index: f.index,
            image: format!("{stem}.png"),
            depth: f.gt_depth.as_ref().map(|_| format!("{stem}.pfm")),
            panoptic: format!("{stem}_pan.png"),
            domain: f.domain.clone(),
        };
        let rgb: Vec<u8> = f.image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        write_png(&dir.join(&entry.image), w, h, png::ColorType::Rgb, png::BitDepth::Eight, &rgb)?;
        if let (Some(d), Some(name)) = (&f.gt_depth, &entry.depth) {
            write_pfm(&dir.join(name), d)?;
        }
        let codes: Vec<u8> = f.panoptic.encode()?.iter().flat_map(|c| c.to_be_bytes()).collect();
        write_png(&dir.join(&entry.panoptic), w, h, png::ColorType::Grayscale, png::BitDepth::Sixteen, &codes)?;
        manifest.frames.push(entry);
    }
    let path = dir.join(MANIFEST_NAME);
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Numeric(e.to_string()))?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(path, e))?;
    Ok(manifest)
}

fn write_png(path: &Path, w: usize, h: usize, color: png::ColorType, depth: png::BitDepth, data: &[u8]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    let to_err = |e: png::EncodingError| Error::ingest(path, None, format!("png encode: {e}"));
    let mut writer = enc.write_header().map_err(to_err)?;
    writer.write_image_data(data).map_err(to_err)?;
    writer.finish().map_err(to_err)
}

/// Writes a single-channel little-endian PFM (rows stored bottom to top).
pub fn write_pfm(path: &Path, map: &Tensor<f32>) -> Result<()> {
    let (h, w) = map.hw()?;
    let mut buf = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    for row in (0..h).rev() {
        for v in &map.data()[row * w..(row + 1) * w] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_pfm(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0usize;
    let mut token = || -> Result<(usize, String)> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::ingest(path, Some(start as u64), "truncated PFM header"));
        }
        let t = String::from_utf8_lossy(&bytes[start..pos]).into_owned();
        Ok((start, t))
    };
    let (off, magic) = token()?;
    if magic != "Pf" {
        return Err(Error::ingest(path, Some(off as u64), format!("expected single-channel 'Pf', found {magic:?}")));
    }
    let mut dim = || -> Result<usize> {
        let (off, t) = token()?;
        t.parse()
            .map_err(|_| Error::ingest(path, Some(off as u64), format!("bad PFM dimension {t:?}")))
    };
    let (w, h) = (dim()?, dim()?);
    let (off, t) = token()?;
    let scale: f64 = t
        .parse()
        .map_err(|_| Error::ingest(path, Some(off as u64), format!("bad PFM scale {t:?}")))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::ingest(path, Some(off as u64), "PFM scale must be nonzero"));
    }
    // exactly one whitespace byte separates the header from the data
    let data_start = pos + 1;
    let need = w * h * 4;
    if bytes.len() < data_start + need {
        return Err(Error::ingest(
            path,
            Some(bytes.len() as u64),
            format!("truncated PFM data: need {need} bytes after offset {data_start}"),
        ));
    }
    let mut out = vec![0f32; w * h];
    for (k, chunk) in bytes[data_start..data_start + need].chunks_exact(4).enumerate() {
        let b: [u8; 4] = chunk.try_into().unwrap();
        let v = if scale < 0.0 { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (row_from_bottom, col) = (k / w, k % w);
        out[(h - 1 - row_from_bottom) * w + col] = v;
    }
    Tensor::new([h, w], out)
}

struct DecodedPng {
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    data: Vec<u8>,
}

fn read_png(path: &Path) -> Result<DecodedPng> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    const SIG: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a];
    if let Some(i) = (0..8).find(|&i| bytes.get(i) != Some(&SIG[i])) {
        return Err(Error::ingest(path, Some(i as u64), "not a PNG file"));
    }
    let mut dec = png::Decoder::new(Cursor::new(&bytes));
    dec.set_transformations(png::Transformations::IDENTITY);
    let to_err = |e: png::DecodingError| Error::ingest(path, None, format!("png decode: {e}"));
    let mut reader = dec.read_info().map_err(to_err)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::ingest(path, None, "image too large"))?;
    let mut data = vec![0; size];
    let info = reader.next_frame(&mut data).map_err(to_err)?;
    data.truncate(info.buffer_size());
    Ok(DecodedPng {
        width: info.width as usize,
        height: info.height as usize,
        color: info.color_type,
        depth: info.bit_depth,
        data,
    })
}

/// Lazily reads the frames listed in a manifest.
pub struct FrameDirStream {
    dir: PathBuf,
    manifest: FrameManifest,
    next: usize,
}

impl FrameDirStream {
    pub fn manifest(&self) -> &FrameManifest {
        &self.manifest
    }

    fn load(&self, e: &ManifestEntry) -> Result<Frame> {
        let (h, w) = (self.manifest.height, self.manifest.width);
        let check = |path: &Path, ph: usize, pw: usize| -> Result<()> {
            if (ph, pw) != (h, w) {
                return Err(Error::Input(format!(
                    "{} is {ph}x{pw}, manifest says {h}x{w}",
                    path.display()
                )));
            }
            Ok(())
        };

        let img_path = self.dir.join(&e.image);
        let img = read_png(&img_path)?;
        check(&img_path, img.height, img.width)?;
        if img.color != png::ColorType::Rgb || img.depth != png::BitDepth::Eight {
            return Err(Error::ingest(&img_path, None, format!("expected 8-bit RGB, got {:?} {:?}", img.color, img.depth)));
        }
        let image = Tensor::new([h, w, 3], img.data.iter().map(|&b| b as f32 / 255.0).collect())?;

        let gt_depth = match &e.depth {
            Some(name) => {
                let p = self.dir.join(name);
                let d = read_pfm(&p)?;
                let (dh, dw) = d.hw()?;
                check(&p, dh, dw)?;
                if let Some(k) = d.data().iter().position(|v| !(v.is_finite() && *v > 0.0)) {
                    return Err(Error::ingest(&p, None, format!("non-positive depth at pixel {k}")));
                }
                Some(d)
            }
            None => None,
        };

        let pan_path = self.dir.join(&e.panoptic);
        let pan = read_png(&pan_path)?;
        check(&pan_path, pan.height, pan.width)?;
        if pan.color != png::ColorType::Grayscale || pan.depth != png::BitDepth::Sixteen {
            return Err(Error::ingest(&pan_path, None, format!("expected 16-bit grayscale, got {:?} {:?}", pan.color, pan.depth)));
        }
        let codes: Vec<u16> = pan.data.chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]])).collect();
        let panoptic = PanopticMask::from_encoded(h, w, &codes, self.manifest.labels.clone())
            .map_err(|err| Error::ingest(&pan_path, None, err.to_string()))?;

        Ok(Frame {
            index: e.index,
            image,
            gt_depth,
            panoptic,
            domain: e.domain.clone(),
        })
    }
}

impl Iterator for FrameDirStream {
    type Item = Result<Frame>;

    fn next(&mut self) -> Option<Self::Item> {
        let e = self.manifest.frames.get(self.next)?.clone();
        self.next += 1;
        Some(self.load(&e))
    }
}

/// Opens a frame directory; `manifest` defaults to [`MANIFEST_NAME`].
pub fn load_frame_dir(dir: impl AsRef<Path>, manifest: Option<&str>) -> Result<FrameDirStream> {
    let dir = dir.as_ref().to_path_buf();
    let path = dir.join(manifest.unwrap_or(MANIFEST_NAME));
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: FrameManifest = serde_json::from_str(&text).map_err(|e| {
        let offset = text
            .lines()
            .take(e.line().saturating_sub(1))
            .map(|l| l.len() + 1)
            .sum::<usize>()
            + e.column().saturating_sub(1);
        Error::ingest(&path, Some(offset as u64), e.to_string())
    })?;
    if manifest.format != MANIFEST_FORMAT || manifest.version != MANIFEST_VERSION {
        return Err(Error::ingest(
            &path,
            None,
            format!("unsupported manifest {} v{}", manifest.format, manifest.version),
        ));
    }
    Ok(FrameDirStream { dir, manifest, next: 0 })
}
