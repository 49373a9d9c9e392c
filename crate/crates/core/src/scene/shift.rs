use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Frame;
use crate::error::{Error, Result};

/// Synthetic weather / exposure shift applied to a rendered frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DomainShift {
    #[default]
    None,
    /// Koschmieder fog: `I' = I t + A (1 - t)`, `t = exp(-strength * depth)`.
    /// `strength` in `[0, 1]` per metre, `airlight` in `[0, 1]`.
    Fog { strength: f64, airlight: f64 },
    /// Bright slanted streaks; `density` in `[0, 1]` scales the streak count
    /// (one streak per 16 pixels at density 1).
    Rain { density: f64, seed: u64 },
    /// `I' = clamp(factor * I, 0, 1)`, `factor` in `[0, 4]`.
    Brightness { factor: f64 },
}

pub const DEFAULT_AIRLIGHT: f64 = 0.85;

impl DomainShift {
    pub fn fog(strength: f64) -> Self {
        DomainShift::Fog {
            strength,
            airlight: DEFAULT_AIRLIGHT,
        }
    }

    pub fn default_tag(&self) -> &'static str {
        match self {
            DomainShift::None => "source",
            DomainShift::Fog { .. } => "foggy",
            DomainShift::Rain { .. } => "rainy",
            DomainShift::Brightness { .. } => "bright",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64, lo: f64, hi: f64| {
            Err(Error::Config(format!("{what} {v} outside [{lo}, {hi}]")))
        };
        match *self {
            DomainShift::None => Ok(()),
            DomainShift::Fog { strength, airlight } => {
                if !(0.0..=1.0).contains(&strength) {
                    bad("fog strength", strength, 0.0, 1.0)
                } else if !(0.0..=1.0).contains(&airlight) {
                    bad("fog airlight", airlight, 0.0, 1.0)
                } else {
                    Ok(())
                }
            }
            DomainShift::Rain { density, .. } if !(0.0..=1.0).contains(&density) => bad("rain density", density, 0.0, 1.0),
            DomainShift::Brightness { factor } if !(0.0..=4.0).contains(&factor) => {
                bad("brightness factor", factor, 0.0, 4.0)
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for DomainShift {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DomainShift::None => write!(f, "none"),
            DomainShift::Fog { strength, airlight } => write!(f, "fog:{strength}:{airlight}"),
            DomainShift::Rain { density, seed } => write!(f, "rain:{density}:{seed}"),
            DomainShift::Brightness { factor } => write!(f, "brightness:{factor}"),
        }
    }
}

/// Parses `none`, `fog:<strength>[:<airlight>]`, `rain:<density>[:<seed>]`
/// or `brightness:<factor>`.
impl FromStr for DomainShift {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let num = |i: usize| -> Result<f64> {
            parts[i]
                .parse()
                .map_err(|_| Error::Config(format!("bad number {:?} in domain shift {s:?}", parts[i])))
        };
        let shift = match (parts[0], parts.len()) {
            ("none", 1) => DomainShift::None,
            ("fog", 2) => DomainShift::fog(num(1)?),
            ("fog", 3) => DomainShift::Fog {
                strength: num(1)?,
                airlight: num(2)?,
            },
            ("rain", 2) => DomainShift::Rain { density: num(1)?, seed: 0 },
            ("rain", 3) => DomainShift::Rain {
                density: num(1)?,
                seed: parts[2].parse().map_err(|_| Error::Config(format!("bad rain seed in {s:?}")))?,
            },
            ("brightness", 2) => DomainShift::Brightness { factor: num(1)? },
            _ => return Err(Error::Config(format!("unknown domain shift {s:?}"))),
        };
        shift.validate()?;
        Ok(shift)
    }
}

/// Returns a shifted copy of `frame`. Depth, panoptic mask, index and
/// domain tag are carried over untouched.
pub fn apply_domain_shift(frame: &Frame, shift: &DomainShift) -> Result<Frame> {
    shift.validate()?;
    let mut out = frame.clone();
    let c = frame.image.shape()[2];
    match *shift {
        DomainShift::None => {}
        DomainShift::Fog { strength, airlight } => {
            if strength == 0.0 {
                return Ok(out);
            }
            let depth = frame
                .gt_depth
                .as_ref()
                .ok_or_else(|| Error::Input(format!("fog needs ground-truth depth (frame {})", frame.index)))?;
            for (px, &d) in out.image.data_mut().chunks_exact_mut(c).zip(depth.data()) {
                let t = (-strength * d as f64).exp();
                for v in px {
                    *v = ((*v as f64) * t + airlight * (1.0 - t)).clamp(0.0, 1.0) as f32;
                }
            }
        }
        DomainShift::Rain { density, seed } => {
            let (h, w) = (frame.height(), frame.width());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(frame.index as u64);
            let streaks = (density * (h * w) as f64 / 16.0).round() as usize;
            let img = out.image.data_mut();
            for _ in 0..streaks {
                let (mut y, mut x) = (rng.random_range(0..h) as isize, rng.random_range(0..w) as isize);
                let len = rng.random_range(3..8);
                for k in 0..len {
                    if y >= h as isize || x < 0 {
                        break;
                    }
                    let p = (y as usize * w + x as usize) * c;
                    for v in &mut img[p..p + c] {
                        *v = (*v + 0.25).min(1.0);
                    }
                    y += 1;
                    if k % 2 == 1 {
                        x -= 1;
                    }
                }
            }
        }
        DomainShift::Brightness { factor } => {
            for v in out.image.data_mut() {
                *v = ((*v as f64) * factor).clamp(0.0, 1.0) as f32;
            }
        }
    }
    Ok(out)
}
