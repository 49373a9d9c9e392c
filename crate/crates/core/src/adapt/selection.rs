use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{LayerKind, ParameterStore, Part};
use crate::scalar::Scalar;

/// Which parameters form the adapted subset θ.
///
/// String forms: `bn-encoder-all`, `bn-last:0.5`, `conv:0.25+bn:1`, and
/// `names:enc0.bn.gamma,enc1.bn.beta`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum SelectionSpec {
    /// Every encoder batch-norm scale and shift.
    BnEncoderAll,
    /// The deepest fraction of encoder batch-norm layers.
    BnLast(f64),
    /// The deepest fractions of encoder convolutions and batch-norm layers.
    ConvBn { conv: f64, bn: f64 },
    Explicit(Vec<String>),
}

impl Default for SelectionSpec {
    fn default() -> Self {
        SelectionSpec::BnEncoderAll
    }
}

fn check_fraction(f: f64) -> Result<f64> {
    if (0.0..=1.0).contains(&f) {
        Ok(f)
    } else {
        Err(Error::Config(format!("selection fraction {f} outside [0, 1]")))
    }
}

fn parse_fraction(s: &str) -> Result<f64> {
    let s = s.trim();
    let v = match s.strip_suffix('%') {
        Some(p) => p.trim().parse::<f64>().map(|v| v / 100.0),
        None => s.parse::<f64>(),
    };
    check_fraction(v.map_err(|_| Error::Config(format!("bad selection fraction `{s}`")))?)
}

impl SelectionSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            SelectionSpec::BnEncoderAll => Ok(()),
            SelectionSpec::BnLast(b) => check_fraction(*b).map(drop),
            SelectionSpec::ConvBn { conv, bn } => check_fraction(*conv).and(check_fraction(*bn)).map(drop),
            SelectionSpec::Explicit(names) if names.iter().any(|n| n.is_empty()) => {
                Err(Error::Config("empty parameter name in selection".into()))
            }
            SelectionSpec::Explicit(_) => Ok(()),
        }
    }
}

impl FromStr for SelectionSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let spec = if s == "bn-encoder-all" {
            SelectionSpec::BnEncoderAll
        } else if let Some(b) = s.strip_prefix("bn-last:") {
            SelectionSpec::BnLast(parse_fraction(b)?)
        } else if let Some(list) = s.strip_prefix("names:") {
            SelectionSpec::Explicit(list.split(',').map(|n| n.trim().to_owned()).filter(|n| !n.is_empty()).collect())
        } else if let Some((c, b)) = s.split_once('+') {
            let conv = c.trim().strip_prefix("conv:");
            let bn = b.trim().strip_prefix("bn:");
            match (conv, bn) {
                (Some(c), Some(b)) => SelectionSpec::ConvBn {
                    conv: parse_fraction(c)?,
                    bn: parse_fraction(b)?,
                },
                _ => return Err(Error::Config(format!("unknown selection `{s}`"))),
            }
        } else {
            return Err(Error::Config(format!("unknown selection `{s}`")));
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl fmt::Display for SelectionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SelectionSpec::BnEncoderAll => f.write_str("bn-encoder-all"),
            SelectionSpec::BnLast(b) => write!(f, "bn-last:{b}"),
            SelectionSpec::ConvBn { conv, bn } => write!(f, "conv:{conv}+bn:{bn}"),
            SelectionSpec::Explicit(names) => write!(f, "names:{}", names.join(",")),
        }
    }
}

impl TryFrom<String> for SelectionSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<SelectionSpec> for String {
    fn from(s: SelectionSpec) -> String {
        s.to_string()
    }
}

/// Encoder layer depths of `kind`, shallowest first.
fn encoder_layers<T: Scalar>(store: &ParameterStore<T>, bn: bool) -> Vec<usize> {
    let mut depths: Vec<usize> = store
        .entries()
        .iter()
        .filter(|e| e.part == Part::Encoder && e.kind.is_bn() == bn && (bn || e.kind == LayerKind::Conv))
        .map(|e| e.depth)
        .collect();
    depths.dedup();
    depths
}

fn deepest(layers: &[usize], fraction: f64) -> &[usize] {
    let k = (fraction * layers.len() as f64).round() as usize;
    &layers[layers.len() - k.min(layers.len())..]
}

/// Marks θ in `store` and returns the selected parameter names in store order.
///
/// Fractions count whole layers (a batch-norm layer contributes both its
/// scale and shift) from the deepest encoder stage backwards, rounding
/// `fraction * layers` to the nearest integer.
pub fn resolve_selection<T: Scalar>(spec: &SelectionSpec, store: &mut ParameterStore<T>) -> Result<Vec<String>> {
    spec.validate()?;
    let bn_layers = encoder_layers(store, true);
    let conv_layers = encoder_layers(store, false);
    let (conv_sel, bn_sel): (Vec<usize>, Vec<usize>) = match spec {
        SelectionSpec::BnEncoderAll => (vec![], bn_layers.clone()),
        SelectionSpec::BnLast(b) => (vec![], deepest(&bn_layers, *b).to_vec()),
        SelectionSpec::ConvBn { conv, bn } => (deepest(&conv_layers, *conv).to_vec(), deepest(&bn_layers, *bn).to_vec()),
        SelectionSpec::Explicit(names) => {
            if let Some(missing) = names.iter().find(|n| store.index_of(n).is_none()) {
                return Err(Error::Config(format!("unknown parameter `{missing}` in selection")));
            }
            for e in store.entries_mut() {
                e.adaptable = names.contains(&e.name);
            }
            return Ok(store.adaptable_names());
        }
    };
    for e in store.entries_mut() {
        e.adaptable = e.part == Part::Encoder
            && if e.kind.is_bn() {
                bn_sel.contains(&e.depth)
            } else {
                e.kind == LayerKind::Conv && conv_sel.contains(&e.depth)
            };
    }
    Ok(store.adaptable_names())
}
