use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Smallest depth admitted into the logarithmic metrics.
pub const MIN_EVAL_DEPTH: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// Unweighted mean of per-frame metric values.
    #[default]
    PerFrame,
    /// Valid-pixel-weighted combination, equivalent to pooling all pixels.
    Pooled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub depth_cap: f64,
    /// Treat ground truth at or beyond the cap (sky, unbounded background)
    /// as unmeasured and leave it out, as LiDAR-based benchmarks do.
    pub exclude_beyond_cap: bool,
    pub median_scaling: bool,
    pub aggregation: Aggregation,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            depth_cap: 80.0,
            exclude_beyond_cap: true,
            median_scaling: false,
            aggregation: Aggregation::PerFrame,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.depth_cap > MIN_EVAL_DEPTH) {
            return Err(Error::Config(format!("depth cap {} is too small", self.depth_cap)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub valid: usize,
    pub domain: String,
}

impl MetricRecord {
    pub const FIELDS: [&'static str; 7] = ["abs_rel", "sq_rel", "rmse", "rmse_log", "delta1", "delta2", "delta3"];

    pub fn values(&self) -> [f64; 7] {
        [
            self.abs_rel,
            self.sq_rel,
            self.rmse,
            self.rmse_log,
            self.delta1,
            self.delta2,
            self.delta3,
        ]
    }

    /// Looks up a metric by its [`Self::FIELDS`] name.
    pub fn get(&self, name: &str) -> Option<f64> {
        Self::FIELDS.iter().position(|f| *f == name).map(|i| self.values()[i])
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    let k = (v.len() - 1) / 2;
    let (_, m, _) = v.select_nth_unstable_by(k, f64::total_cmp);
    *m
}

/// Standard depth metrics over pixels that are valid and have `gt > 0`
/// (and `gt < cfg.depth_cap` when `cfg.exclude_beyond_cap` is set).
///
/// Both maps are clamped to `[MIN_EVAL_DEPTH, cfg.depth_cap]` after the
/// optional median scaling of the prediction.
pub fn compute_metrics<T: Scalar>(
    pred: &Tensor<T>,
    gt: &Tensor<T>,
    valid: Option<&[bool]>,
    cfg: &EvalConfig,
    domain: &str,
) -> Result<MetricRecord> {
    cfg.validate()?;
    let (h, w) = gt.hw()?;
    if pred.hw()? != (h, w) {
        return Err(Error::dim("compute_metrics", format!("pred {:?} vs gt {:?}", pred.shape(), gt.shape())));
    }
    if valid.is_some_and(|m| m.len() != h * w) {
        return Err(Error::dim("compute_metrics", "valid mask size"));
    }
    let idx: Vec<usize> = (0..h * w)
        .filter(|&i| {
            let g = gt.data()[i];
            valid.is_none_or(|m| m[i]) && g > T::zero() && !(cfg.exclude_beyond_cap && g.as_f64() >= cfg.depth_cap)
        })
        .collect();
    if idx.is_empty() {
        return Err(Error::Evaluation("no valid pixels".into()));
    }
    let mut p: Vec<f64> = idx.iter().map(|&i| pred.data()[i].as_f64()).collect();
    let g: Vec<f64> = idx.iter().map(|&i| gt.data()[i].as_f64()).collect();
    if p.iter().chain(&g).any(|v| !v.is_finite()) {
        return Err(Error::Evaluation("non-finite depth".into()));
    }
    if cfg.median_scaling {
        let s = median(g.clone()) / median(p.clone()).max(MIN_EVAL_DEPTH);
        p.iter_mut().for_each(|v| *v *= s);
    }
    let clamp = |v: f64| v.clamp(MIN_EVAL_DEPTH, cfg.depth_cap);
    let n = idx.len() as f64;
    let (mut abs_rel, mut sq_rel, mut se, mut se_log) = (0.0, 0.0, 0.0, 0.0);
    let mut hits = [0usize; 3];
    for (&pv, &gv) in p.iter().zip(&g) {
        let (pv, gv) = (clamp(pv), clamp(gv));
        let d = pv - gv;
        abs_rel += d.abs() / gv;
        sq_rel += d * d / gv;
        se += d * d;
        se_log += (pv.ln() - gv.ln()).powi(2);
        let ratio = (pv / gv).max(gv / pv);
        for (k, hit) in hits.iter_mut().enumerate() {
            if ratio < 1.25f64.powi(k as i32 + 1) {
                *hit += 1;
            }
        }
    }
    Ok(MetricRecord {
        abs_rel: abs_rel / n,
        sq_rel: sq_rel / n,
        rmse: (se / n).sqrt(),
        rmse_log: (se_log / n).sqrt(),
        delta1: hits[0] as f64 / n,
        delta2: hits[1] as f64 / n,
        delta3: hits[2] as f64 / n,
        valid: idx.len(),
        domain: domain.to_owned(),
    })
}

/// Combines per-frame records under `rule`. `None` for an empty slice.
///
/// `PerFrame` averages each metric over frames. `Pooled` weights frames by
/// valid-pixel count and combines root-mean-square metrics in the squared
/// domain, which reproduces a single evaluation over all pixels.
pub fn aggregate(records: &[MetricRecord], rule: Aggregation, domain: &str) -> Option<MetricRecord> {
    if records.is_empty() {
        return None;
    }
    let valid: usize = records.iter().map(|r| r.valid).sum();
    let weight = |r: &MetricRecord| match rule {
        Aggregation::PerFrame => 1.0 / records.len() as f64,
        Aggregation::Pooled => r.valid as f64 / valid as f64,
    };
    let mean = |f: fn(&MetricRecord) -> f64| records.iter().map(|r| weight(r) * f(r)).sum::<f64>();
    let rms = |f: fn(&MetricRecord) -> f64| match rule {
        Aggregation::PerFrame => mean(f),
        Aggregation::Pooled => records.iter().map(|r| weight(r) * f(r).powi(2)).sum::<f64>().sqrt(),
    };
    Some(MetricRecord {
        abs_rel: mean(|r| r.abs_rel),
        sq_rel: mean(|r| r.sq_rel),
        rmse: rms(|r| r.rmse),
        rmse_log: rms(|r| r.rmse_log),
        delta1: mean(|r| r.delta1),
        delta2: mean(|r| r.delta2),
        delta3: mean(|r| r.delta3),
        valid,
        domain: domain.to_owned(),
    })
}

/// Aggregate per domain tag, plus an `"all"` entry over every record.
pub fn aggregate_by_domain(records: &[MetricRecord], rule: Aggregation) -> BTreeMap<String, MetricRecord> {
    let mut groups: BTreeMap<String, Vec<MetricRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.domain.clone()).or_default().push(r.clone());
    }
    let mut out: BTreeMap<String, MetricRecord> = groups
        .iter()
        .filter_map(|(d, rs)| aggregate(rs, rule, d).map(|m| (d.clone(), m)))
        .collect();
    if let Some(all) = aggregate(records, rule, "all") {
        out.insert("all".into(), all);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::new([1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn perfect_prediction() {
        let g = t(&[1.0, 5.0, 20.0]);
        let m = compute_metrics(&g, &g, None, &EvalConfig::default(), "x").unwrap();
        assert_eq!(m.values(), [0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn ratio_at_threshold() {
        let g = t(&[2.0, 4.0, 8.0]);
        let p = t(&[2.5, 5.0, 10.0]);
        let m = compute_metrics(&p, &g, None, &EvalConfig::default(), "x").unwrap();
        assert_eq!(m.delta1, 0.0);
        assert_eq!((m.delta2, m.delta3), (1.0, 1.0));
        assert!((m.abs_rel - 0.25).abs() < 1e-12);
    }

    #[test]
    fn two_pixel_example() {
        let m = compute_metrics(&t(&[2.0, 8.0]), &t(&[1.0, 4.0]), None, &EvalConfig::default(), "x").unwrap();
        assert!((m.abs_rel - 1.0).abs() < 1e-12);
        assert!((m.rmse - (17.0f64 / 2.0).sqrt()).abs() < 1e-12);
        assert_eq!(m.delta1, 0.0);
    }

    #[test]
    fn empty_valid_set_is_an_error() {
        let g = t(&[1.0, 2.0]);
        let r = compute_metrics(&g, &g, Some(&[false, false]), &EvalConfig::default(), "x");
        assert!(matches!(r, Err(Error::Evaluation(_))));
        let zero = t(&[0.0, 0.0]);
        assert!(compute_metrics(&g, &zero, None, &EvalConfig::default(), "x").is_err());
    }

    #[test]
    fn cap_applies_to_both_maps() {
        let cfg = EvalConfig {
            exclude_beyond_cap: false,
            ..Default::default()
        };
        let m = compute_metrics(&t(&[100.0]), &t(&[90.0]), None, &cfg, "x").unwrap();
        assert_eq!(m.abs_rel, 0.0);
    }

    #[test]
    fn unmeasured_depth_is_excluded_by_default() {
        let m = compute_metrics(&t(&[2.0, 3.0]), &t(&[2.0, 80.0]), None, &EvalConfig::default(), "x").unwrap();
        assert_eq!((m.valid, m.abs_rel), (1, 0.0));
        assert!(compute_metrics(&t(&[2.0]), &t(&[85.0]), None, &EvalConfig::default(), "x").is_err());
    }

    #[test]
    fn median_scaling_removes_global_scale() {
        let g = t(&[1.0, 3.0, 7.0]);
        let cfg = EvalConfig {
            median_scaling: true,
            ..Default::default()
        };
        let m = compute_metrics(&g.scale(3.0), &g, None, &cfg, "x").unwrap();
        assert!(m.abs_rel < 1e-12);
    }

    #[test]
    fn pooled_matches_joint_evaluation() {
        let cfg = EvalConfig::default();
        let (p1, g1) = (t(&[1.0, 2.0, 3.0]), t(&[1.5, 2.0, 2.0]));
        let (p2, g2) = (t(&[4.0]), t(&[5.0]));
        let a = compute_metrics(&p1, &g1, None, &cfg, "a").unwrap();
        let b = compute_metrics(&p2, &g2, None, &cfg, "a").unwrap();
        let joint = compute_metrics(&t(&[1.0, 2.0, 3.0, 4.0]), &t(&[1.5, 2.0, 2.0, 5.0]), None, &cfg, "a").unwrap();
        let pooled = aggregate(&[a.clone(), b.clone()], Aggregation::Pooled, "a").unwrap();
        for (x, y) in pooled.values().iter().zip(joint.values()) {
            assert!((x - y).abs() < 1e-12);
        }
        let per_frame = aggregate(&[a.clone(), b.clone()], Aggregation::PerFrame, "a").unwrap();
        assert!((per_frame.abs_rel - (a.abs_rel + b.abs_rel) / 2.0).abs() < 1e-15);
        assert_eq!(per_frame.valid, 4);
    }

    #[test]
    fn by_domain_groups() {
        let cfg = EvalConfig::default();
        let a = compute_metrics(&t(&[1.0]), &t(&[2.0]), None, &cfg, "foggy").unwrap();
        let b = compute_metrics(&t(&[2.0]), &t(&[2.0]), None, &cfg, "source").unwrap();
        let m = aggregate_by_domain(&[a, b], Aggregation::PerFrame);
        assert_eq!(m.keys().collect::<Vec<_>>(), ["all", "foggy", "source"]);
        assert!((m["all"].abs_rel - 0.25).abs() < 1e-15);
        assert!(aggregate(&[], Aggregation::PerFrame, "x").is_none());
    }
}
