//! Synthetic driving-like scenes with exact ground truth, weather-style
//! domain shifts, and an on-disk frame directory format.

mod io;
mod render;
mod shift;

pub use io::{load_frame_dir, write_frame_dir, FrameDirStream, FrameManifest, ManifestEntry, MANIFEST_NAME};
pub use render::{generate_frame, render_scene, PlacedObject, Shape};
pub use shift::{apply_domain_shift, DomainShift};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segmentation::PanopticMask;
use crate::tensor::Tensor;

pub const LABEL_GROUND: u16 = 1;
pub const LABEL_BUILDING: u16 = 2;
pub const LABEL_SKY: u16 = 3;
pub const LABEL_CAR: u16 = 4;
pub const LABEL_PERSON: u16 = 5;

/// Label names of synthetic scenes.
pub fn label_names() -> BTreeMap<u16, String> {
    [
        (LABEL_GROUND, "ground"),
        (LABEL_BUILDING, "building"),
        (LABEL_SKY, "sky"),
        (LABEL_CAR, "car"),
        (LABEL_PERSON, "person"),
    ]
    .into_iter()
    .map(|(k, v)| (k, v.to_owned()))
    .collect()
}

/// Labels of movable objects.
pub fn dynamic_labels() -> Vec<String> {
    vec!["car".to_owned(), "person".to_owned()]
}

/// One monocular frame. Ground-truth depth is for evaluation only.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub index: usize,
    /// `[H, W, 3]`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    /// `[H, W]`, strictly positive.
    pub gt_depth: Option<Tensor<f32>>,
    pub panoptic: PanopticMask,
    pub domain: String,
}

impl Frame {
    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }
}

/// Pinhole intrinsics with zero skew.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    /// Default camera for a `height x width` sensor: focal length `0.75 W`,
    /// horizon slightly above the image centre.
    pub fn for_resolution(height: usize, width: usize) -> Self {
        CameraIntrinsics {
            fx: 0.75 * width as f64,
            fy: 0.75 * width as f64,
            cx: 0.5 * width as f64,
            cy: 0.45 * height as f64,
        }
    }

    pub fn matrix(&self) -> [[f64; 3]; 3] {
        [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(Error::Config(format!("invalid intrinsics {self:?}")));
        }
        Ok(())
    }
}

/// Inclusive numeric range.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range<T> {
    pub min: T,
    pub max: T,
}

impl<T: PartialOrd + Copy + std::fmt::Debug> Range<T> {
    pub const fn new(min: T, max: T) -> Self {
        Range { min, max }
    }

    fn check(&self, what: &str) -> Result<()> {
        if self.min > self.max {
            return Err(Error::Config(format!("empty range for {what}: {self:?}")));
        }
        Ok(())
    }
}

/// Size, placement and motion ranges for one object class (metres, metres
/// per frame).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub width: Range<f64>,
    pub height: Range<f64>,
    pub depth: Range<f64>,
    pub lateral: Range<f64>,
    pub speed_x: Range<f64>,
    pub speed_z: Range<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectCatalog {
    pub car: ObjectSpec,
    pub person: ObjectSpec,
    pub building: ObjectSpec,
    /// Fraction of dynamic objects that are persons.
    pub person_fraction: f64,
}

impl Default for ObjectCatalog {
    fn default() -> Self {
        ObjectCatalog {
            car: ObjectSpec {
                width: Range::new(1.6, 2.0),
                height: Range::new(1.3, 1.7),
                depth: Range::new(4.0, 15.0),
                lateral: Range::new(-6.0, 6.0),
                speed_x: Range::new(-0.15, 0.15),
                speed_z: Range::new(-0.4, 0.4),
            },
            person: ObjectSpec {
                width: Range::new(0.5, 0.7),
                height: Range::new(1.6, 1.9),
                depth: Range::new(3.0, 15.0),
                lateral: Range::new(-5.0, 5.0),
                speed_x: Range::new(-0.05, 0.05),
                speed_z: Range::new(-0.1, 0.1),
            },
            building: ObjectSpec {
                width: Range::new(6.0, 16.0),
                height: Range::new(6.0, 20.0),
                depth: Range::new(30.0, 60.0),
                lateral: Range::new(-30.0, 30.0),
                speed_x: Range::new(0.0, 0.0),
                speed_z: Range::new(0.0, 0.0),
            },
            person_fraction: 0.35,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    /// Defaults to [`CameraIntrinsics::for_resolution`].
    pub intrinsics: Option<CameraIntrinsics>,
    /// Camera height above the ground plane in metres.
    pub camera_height: f64,
    /// Depth assigned to sky and to ground beyond it.
    pub far_depth: f64,
    pub dynamic_objects: Range<usize>,
    pub static_objects: Range<usize>,
    pub catalog: ObjectCatalog,
    /// Frames sharing one object layout before a new one is drawn.
    pub episode_length: usize,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 64,
            width: 64,
            intrinsics: None,
            camera_height: 1.5,
            far_depth: 80.0,
            dynamic_objects: Range::new(4, 8),
            static_objects: Range::new(1, 3),
            catalog: ObjectCatalog::default(),
            episode_length: 20,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn with_size(height: usize, width: usize, seed: u64) -> Self {
        SceneConfig {
            height,
            width,
            seed,
            ..Default::default()
        }
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        self.intrinsics
            .unwrap_or_else(|| CameraIntrinsics::for_resolution(self.height, self.width))
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("scene resolution must be positive".into()));
        }
        self.intrinsics().validate()?;
        if !(self.camera_height > 0.0 && self.far_depth > 0.0) {
            return Err(Error::Config("camera height and far depth must be positive".into()));
        }
        if self.episode_length == 0 {
            return Err(Error::Config("episode length must be positive".into()));
        }
        self.dynamic_objects.check("dynamic objects")?;
        self.static_objects.check("static objects")?;
        if self.dynamic_objects.max + self.static_objects.max > 255 {
            return Err(Error::Config("at most 255 instances per frame".into()));
        }
        let c = &self.catalog;
        for (name, s) in [("car", &c.car), ("person", &c.person), ("building", &c.building)] {
            for (field, r) in [
                ("width", s.width),
                ("height", s.height),
                ("depth", s.depth),
                ("lateral", s.lateral),
                ("speed_x", s.speed_x),
                ("speed_z", s.speed_z),
            ] {
                r.check(&format!("{name}.{field}"))?;
            }
            if !(s.depth.min > 0.0 && s.width.min > 0.0 && s.height.min > 0.0) {
                return Err(Error::Config(format!("{name} sizes and depths must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&c.person_fraction) {
            return Err(Error::Config("person fraction outside [0, 1]".into()));
        }
        Ok(())
    }

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
}

/// A finite, reproducible run of synthetic frames `start .. start + len`.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneStream {
    pub config: SceneConfig,
    pub shift: DomainShift,
    pub domain: String,
    pub start: usize,
    pub len: usize,
}

impl SceneStream {
    pub fn new(config: SceneConfig, shift: DomainShift, len: usize) -> Self {
        let domain = shift.default_tag().to_owned();
        SceneStream {
            config,
            shift,
            domain,
            start: 0,
            len,
        }
    }

    pub fn frame(&self, t: usize) -> Result<Frame> {
        let mut f = generate_frame(&self.config, t)?;
        f = apply_domain_shift(&f, &self.shift)?;
        f.domain = self.domain.clone();
        Ok(f)
    }

    pub fn iter(&self) -> impl Iterator<Item = Result<Frame>> + '_ {
        (self.start..self.start + self.len).map(move |t| self.frame(t))
    }
}

impl IntoIterator for SceneStream {
    type Item = Result<Frame>;
    type IntoIter = Box<dyn Iterator<Item = Result<Frame>>>;

    fn into_iter(self) -> Self::IntoIter {
        Box::new((self.start..self.start + self.len).map(move |t| self.frame(t)))
    }
}
