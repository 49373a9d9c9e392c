use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::signal::EdgeMap;
use crate::tensor::{Tape, Tensor, Var};

/// Trade-off weight of the edge-guided loss. `Infinite` trains on the edge
/// loss alone.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Lambda {
    Finite(f64),
    Infinite,
}

impl Default for Lambda {
    fn default() -> Self {
        Lambda::Finite(0.2)
    }
}

impl Lambda {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Lambda::Finite(v) if !(v >= 0.0 && v.is_finite()) => {
                Err(Error::Config(format!("lambda {v} must be non-negative")))
            }
            _ => Ok(()),
        }
    }

    /// Weights `(w_d, w_e)` such that `L = w_d L_d + w_e L_e`.
    pub fn weights(&self) -> (f64, f64) {
        match *self {
            Lambda::Finite(v) => (1.0, v),
            Lambda::Infinite => (0.0, 1.0),
        }
    }

    pub fn is_zero(&self) -> bool {
        *self == Lambda::Finite(0.0)
    }
}

impl fmt::Display for Lambda {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Lambda::Finite(v) => write!(f, "{v}"),
            Lambda::Infinite => f.write_str("inf"),
        }
    }
}

impl FromStr for Lambda {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let l = match s.to_ascii_lowercase().as_str() {
            "inf" | "infinity" | "∞" => Lambda::Infinite,
            other => Lambda::Finite(
                other
                    .parse()
                    .map_err(|_| Error::Config(format!("bad lambda `{s}`")))?,
            ),
        };
        if let Lambda::Finite(v) = l {
            if v.is_infinite() {
                return Ok(Lambda::Infinite);
            }
        }
        l.validate()?;
        Ok(l)
    }
}

impl Serialize for Lambda {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Lambda::Finite(v) => s.serialize_f64(*v),
            Lambda::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Lambda {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        let l = match Repr::deserialize(d)? {
            Repr::Num(v) => Lambda::Finite(v),
            Repr::Text(s) => s.parse().map_err(serde::de::Error::custom)?,
        };
        l.validate().map_err(serde::de::Error::custom)?;
        Ok(l)
    }
}

/// Distance used between masked depth and its pseudo-label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DepthLossNorm {
    #[default]
    L1,
    /// Squared Euclidean distance.
    L2,
}

fn check_pairs<T: Scalar>(masked: &[Tensor<T>], labels: &[Tensor<T>]) -> Result<()> {
    if masked.len() != labels.len() {
        return Err(Error::dim(
            "depth_refining_loss",
            format!("{} masked maps vs {} pseudo-labels", masked.len(), labels.len()),
        ));
    }
    for (m, l) in masked.iter().zip(labels) {
        if m.shape() != l.shape() {
            return Err(Error::dim("depth_refining_loss", format!("{:?} vs {:?}", m.shape(), l.shape())));
        }
    }
    Ok(())
}

/// `L_d = (1/N) Σ_j ||D̃_j − D̃'_j||`, zero when `N = 0`.
pub fn depth_refining_loss<T: Scalar>(masked: &[Tensor<T>], labels: &[Tensor<T>], norm: DepthLossNorm) -> Result<T> {
    check_pairs(masked, labels)?;
    if masked.is_empty() {
        return Ok(T::zero());
    }
    let total: T = masked
        .iter()
        .zip(labels)
        .map(|(m, l)| {
            m.data()
                .iter()
                .zip(l.data())
                .map(|(&a, &b)| match norm {
                    DepthLossNorm::L1 => (a - b).abs(),
                    DepthLossNorm::L2 => (a - b) * (a - b),
                })
                .sum::<T>()
        })
        .sum();
    Ok(total / T::of(masked.len() as f64))
}

/// Differentiable [`depth_refining_loss`]; the labels are constants.
/// Returns `None` when there are no instances.
pub fn depth_refining_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    masked: &[Var],
    labels: &[Tensor<T>],
    norm: DepthLossNorm,
) -> Result<Option<Var>> {
    if masked.len() != labels.len() {
        return Err(Error::dim(
            "depth_refining_loss",
            format!("{} masked maps vs {} pseudo-labels", masked.len(), labels.len()),
        ));
    }
    let mut acc: Option<Var> = None;
    for (&m, l) in masked.iter().zip(labels) {
        let target = tape.constant(l.clone());
        let diff = tape.sub(m, target)?;
        let dist = match norm {
            DepthLossNorm::L1 => tape.abs(diff),
            DepthLossNorm::L2 => tape.square(diff),
        };
        let s = tape.sum(dist);
        acc = Some(match acc {
            Some(a) => tape.add(a, s)?,
            None => s,
        });
    }
    Ok(acc.map(|a| tape.scale(a, T::one() / T::of(masked.len() as f64))))
}

/// `L_e = Σ |∂I − ∂D|`.
pub fn edge_guided_loss<T: Scalar>(image_edges: &EdgeMap<T>, depth_edges: &EdgeMap<T>) -> Result<T> {
    let (a, b) = (&image_edges.values, &depth_edges.values);
    if a.shape() != b.shape() {
        return Err(Error::dim("edge_guided_loss", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y).abs()).sum())
}

/// Differentiable [`edge_guided_loss`] with respect to `depth_edges`.
pub fn edge_guided_loss_on_tape<T: Scalar>(tape: &mut Tape<T>, image_edges: &Tensor<T>, depth_edges: Var) -> Result<Var> {
    let target = tape.constant(image_edges.clone());
    let diff = tape.sub(depth_edges, target)?;
    let abs = tape.abs(diff);
    Ok(tape.sum(abs))
}

/// `L = L_d + λ L_e`, or `L_e` alone for infinite λ.
pub fn total_loss<T: Scalar>(loss_depth: T, loss_edge: T, lambda: Lambda) -> Result<T> {
    lambda.validate()?;
    Ok(match lambda {
        Lambda::Finite(v) => loss_depth + T::of(v) * loss_edge,
        Lambda::Infinite => loss_edge,
    })
}
