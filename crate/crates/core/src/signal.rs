//! Image and depth signal operators used by the adaptation losses: instance
//! masking, weighted Laplacian edge maps, windowed median pseudo-labels, and
//! the pinhole reprojection relation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::scene::CameraIntrinsics;
use crate::segmentation::InstanceMaskSet;
use crate::tensor::{laplacian, Tape, Tensor, Var};

fn check_mask_shape<T: Scalar>(depth: &Tensor<T>, masks: &InstanceMaskSet) -> Result<(usize, usize)> {
    let (h, w) = depth.hw()?;
    if (h, w) != (masks.height(), masks.width()) {
        return Err(Error::dim(
            "mask_depth",
            format!("depth {h}x{w} vs masks {}x{}", masks.height(), masks.width()),
        ));
    }
    Ok((h, w))
}

/// `D ⊙ M_j` for every instance mask.
pub fn mask_depth<T: Scalar>(depth: &Tensor<T>, masks: &InstanceMaskSet) -> Result<Vec<Tensor<T>>> {
    let (h, w) = check_mask_shape(depth, masks)?;
    (0..masks.len())
        .map(|j| {
            let m = masks.mask(j);
            Tensor::new(
                [h, w],
                depth.data().iter().zip(m).map(|(&d, &k)| if k { d } else { T::zero() }).collect(),
            )
        })
        .collect()
}

/// Differentiable [`mask_depth`]; gradients reach `depth` only on mask support.
pub fn mask_depth_on_tape<T: Scalar>(tape: &mut Tape<T>, depth: Var, masks: &InstanceMaskSet) -> Result<Vec<Var>> {
    check_mask_shape(tape.value(depth), masks)?;
    (0..masks.len())
        .map(|j| {
            let m = tape.constant(masks.mask_tensor(j));
            tape.mul(depth, m)
        })
        .collect()
}

/// Per-pixel channel mean of an `[H, W, C]` image.
pub fn gray_mean<T: Scalar>(image: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, c) = image.hwc()?;
    if c == 0 {
        return Err(Error::dim("gray_mean", "image has no channels"));
    }
    let inv = T::one() / T::of(c as f64);
    let data = image.data().chunks_exact(c).map(|px| px.iter().copied().sum::<T>() * inv).collect();
    Tensor::new([h, w], data)
}

/// How the non-negative weight fields `U` (image) and `V` (depth) are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode", content = "value")]
pub enum WeightMode {
    /// The same constant everywhere.
    Constant(f64),
    /// `1 / mean(|Laplacian|)` of the map being weighted (1 for a flat map),
    /// so both edge maps have unit mean.
    InverseMean,
}

impl Default for WeightMode {
    fn default() -> Self {
        WeightMode::Constant(1.0)
    }
}

impl WeightMode {
    pub fn validate(&self) -> Result<()> {
        match *self {
            WeightMode::Constant(c) if !(c >= 0.0 && c.is_finite()) => {
                Err(Error::Config(format!("edge weight {c} must be non-negative")))
            }
            _ => Ok(()),
        }
    }

    /// Weight field for `field`; treated as a constant by the losses.
    pub fn weights<T: Scalar>(&self, field: &Tensor<T>) -> Result<Tensor<T>> {
        let (h, w) = field.hw()?;
        let c = match *self {
            WeightMode::Constant(c) => T::of(c),
            WeightMode::InverseMean => {
                let lap = laplacian(field)?;
                let mean = lap.data().iter().map(|v| v.abs()).sum::<T>() / T::of((h * w) as f64);
                if mean > T::zero() {
                    T::one() / mean
                } else {
                    T::one()
                }
            }
        };
        Ok(Tensor::full([h, w], c))
    }
}

/// `values(x, y) = weights(x, y) * |Laplacian(field)(x, y)|`.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeMap<T> {
    pub values: Tensor<T>,
    pub weights: Tensor<T>,
}

fn check_weights<T: Scalar>(field: &Tensor<T>, weights: &Tensor<T>) -> Result<(usize, usize)> {
    let (h, w) = field.hw()?;
    if weights.hw()? != (h, w) {
        return Err(Error::dim("edge_map", format!("field {h}x{w} vs weights {:?}", weights.shape())));
    }
    if weights.data().iter().any(|v| !(*v >= T::zero())) {
        return Err(Error::Parameter("edge weights must be non-negative".into()));
    }
    Ok((h, w))
}

/// Weighted absolute 4-neighbour Laplacian with replicated borders.
pub fn edge_map<T: Scalar>(field: &Tensor<T>, weights: &Tensor<T>) -> Result<EdgeMap<T>> {
    let (h, w) = check_weights(field, weights)?;
    let lap = laplacian(field)?;
    let values = lap
        .data()
        .iter()
        .zip(weights.data())
        .map(|(l, &wt)| wt * l.abs())
        .collect();
    Ok(EdgeMap {
        values: Tensor::new([h, w], values)?,
        weights: weights.clone().reshape([h, w])?,
    })
}

/// Differentiable [`edge_map`] with respect to `field`; `weights` are constant.
pub fn edge_map_on_tape<T: Scalar>(tape: &mut Tape<T>, field: Var, weights: &Tensor<T>) -> Result<Var> {
    let (h, w) = check_weights(tape.value(field), weights)?;
    let lap = tape.laplacian(field)?;
    let mag = tape.abs(lap);
    let wv = tape.constant(weights.clone().reshape([h, w])?);
    tape.mul(mag, wv)
}

/// Which pixels of the clipped window enter the median.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MedianSupport {
    /// Every pixel of the clipped rectangle, zeros outside the mask included.
    #[default]
    FullWindow,
    /// Only mask pixels; output is zero off the mask.
    MaskOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MedianConfig {
    window: usize,
    #[serde(default)]
    pub support: MedianSupport,
}

impl MedianConfig {
    pub fn new(window: usize) -> Result<Self> {
        let cfg = MedianConfig {
            window,
            support: MedianSupport::FullWindow,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_support(mut self, support: MedianSupport) -> Self {
        self.support = support;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.window % 2 == 0 {
            return Err(Error::Config(format!("median window {} must be odd and positive", self.window)));
        }
        Ok(())
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn radius(&self) -> usize {
        self.window / 2
    }
}

fn lower_median<T: Scalar>(buf: &mut [T]) -> T {
    let k = (buf.len() - 1) / 2;
    let (_, m, _) = buf.select_nth_unstable_by(k, |a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    *m
}

/// Median of every clipped `s × s` window. Windows clipped at the border
/// hold fewer values; an even count takes the lower median.
pub fn median_filter<T: Scalar>(map: &Tensor<T>, cfg: &MedianConfig) -> Result<Tensor<T>> {
    median_impl(map, None, cfg)
}

/// Median pseudo-label for a masked depth map under `cfg.support`.
pub fn median_filter_masked<T: Scalar>(map: &Tensor<T>, mask: &[bool], cfg: &MedianConfig) -> Result<Tensor<T>> {
    match cfg.support {
        MedianSupport::FullWindow => median_impl(map, None, cfg),
        MedianSupport::MaskOnly => median_impl(map, Some(mask), cfg),
    }
}

fn median_impl<T: Scalar>(map: &Tensor<T>, mask: Option<&[bool]>, cfg: &MedianConfig) -> Result<Tensor<T>> {
    cfg.validate()?;
    let (h, w) = map.hw()?;
    let f = map.data();
    if let Some(m) = mask {
        if m.len() != h * w {
            return Err(Error::dim("median_filter", format!("mask has {} pixels for {h}x{w}", m.len())));
        }
    }
    let r = cfg.radius();
    let mut out = vec![T::zero(); h * w];
    // A window that sees only zeros has median zero, so only the
    // neighbourhood of the nonzero support needs sorting.
    let nonzero = |p: usize| mask.map_or(f[p] != T::zero(), |m| m[p]);
    let (mut y0, mut y1, mut x0, mut x1) = (h, 0, w, 0);
    for p in (0..h * w).filter(|&p| nonzero(p)) {
        let (y, x) = (p / w, p % w);
        y0 = y0.min(y);
        y1 = y1.max(y);
        x0 = x0.min(x);
        x1 = x1.max(x);
    }
    if y0 > y1 {
        return Tensor::new([h, w], out);
    }
    let (ry0, ry1) = (y0.saturating_sub(r), (y1 + r).min(h - 1));
    let (rx0, rx1) = (x0.saturating_sub(r), (x1 + r).min(w - 1));
    let mut buf = Vec::with_capacity(cfg.window * cfg.window);
    for y in ry0..=ry1 {
        for x in rx0..=rx1 {
            if mask.is_some_and(|m| !m[y * w + x]) {
                continue;
            }
            buf.clear();
            for p in y.saturating_sub(r)..=(y + r).min(h - 1) {
                for q in x.saturating_sub(r)..=(x + r).min(w - 1) {
                    if mask.is_none_or(|m| m[p * w + q]) {
                        buf.push(f[p * w + q]);
                    }
                }
            }
            out[y * w + x] = lower_median(&mut buf);
        }
    }
    Tensor::new([h, w], out)
}

/// Reprojects pixel `(x, y)` with depth `depth` through rotation `r` and
/// translation `t`: `K (R K⁻¹ [x, y, 1]ᵀ depth + t) = z' [x', y', 1]ᵀ`.
///
/// Evaluated as the identity motion plus a displacement
/// `c = depth K (R - I) K⁻¹ p + K t`, so `R = I, t = 0` returns the input
/// pixel and depth bit-for-bit.
pub fn project<T: Scalar>(
    pixel: (T, T),
    depth: T,
    k: &CameraIntrinsics,
    r: &[[T; 3]; 3],
    t: &[T; 3],
) -> Result<((T, T), T)> {
    if !(depth > T::zero()) {
        return Err(Error::Parameter(format!("depth {depth} must be positive")));
    }
    k.validate()?;
    let (fx, fy, cx, cy) = (T::of(k.fx), T::of(k.fy), T::of(k.cx), T::of(k.cy));
    let (x, y) = pixel;
    let ray = [(x - cx) / fx, (y - cy) / fy, T::one()];
    let mut m = [T::zero(); 3];
    for (i, mi) in m.iter_mut().enumerate() {
        for (j, &rj) in ray.iter().enumerate() {
            let delta = if i == j { r[i][j] - T::one() } else { r[i][j] };
            *mi += delta * rj;
        }
    }
    let k_apply = |v: [T; 3]| [fx * v[0] + cx * v[2], fy * v[1] + cy * v[2], v[2]];
    let km = k_apply(m);
    let kt = k_apply(*t);
    let c = [depth * km[0] + kt[0], depth * km[1] + kt[1], depth * km[2] + kt[2]];
    let z = depth + c[2];
    if !(z > T::zero()) {
        return Err(Error::BehindCamera { depth: z.as_f64() });
    }
    Ok(((x + (c[0] - x * c[2]) / z, y + (c[1] - y * c[2]) / z), z))
}

pub fn identity3<T: Scalar>() -> [[T; 3]; 3] {
    let (o, z) = (T::one(), T::zero());
    [[o, z, z], [z, o, z], [z, z, o]]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmentation::{extract_instance_masks, PanopticMask};

    fn masks(h: usize, w: usize, support: &[usize]) -> InstanceMaskSet {
        let mut inst = vec![0; h * w];
        let mut lab = vec![1; h * w];
        for &p in support {
            inst[p] = 1;
            lab[p] = 4;
        }
        let names = [(1u16, "ground".to_string()), (4, "car".to_string())].into_iter().collect();
        extract_instance_masks(&PanopticMask::new(h, w, inst, lab, names).unwrap(), &["car"])
    }

    #[test]
    fn mask_depth_examples() {
        let d = Tensor::new([2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(mask_depth(&d, &masks(2, 2, &[0, 1, 2, 3])).unwrap()[0], d);
        assert_eq!(mask_depth(&d, &masks(2, 2, &[0, 3])).unwrap()[0].data(), &[1.0, 0.0, 0.0, 4.0]);
        let zero = mask_depth(&d, &masks(2, 2, &[])).unwrap();
        assert!(zero.is_empty());
        assert!(mask_depth(&Tensor::<f32>::zeros([3, 2]), &masks(2, 2, &[0])).is_err());
    }

    #[test]
    fn gray_mean_examples() {
        let img = Tensor::new([1, 1, 3], vec![0.2f64, 0.4, 0.6]).unwrap();
        assert!((gray_mean(&img).unwrap().data()[0] - 0.4).abs() < 1e-15);
        let one = Tensor::new([2, 1, 1], vec![0.3f32, 0.9]).unwrap();
        assert_eq!(gray_mean(&one).unwrap().data(), &[0.3, 0.9]);
    }

    #[test]
    fn edge_map_constant_field_is_zero() {
        let f = Tensor::full([4, 5], 3.3f64);
        let e = edge_map(&f, &Tensor::ones([4, 5])).unwrap();
        assert!(e.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn edge_map_center_impulse() {
        let mut f = Tensor::zeros([3, 3]);
        f.data_mut()[4] = 1.0f64;
        let e = edge_map(&f, &Tensor::ones([3, 3])).unwrap();
        assert_eq!(e.values.data(), &[0.0, 1.0, 0.0, 1.0, 4.0, 1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn edge_map_corner_clamping() {
        let f = Tensor::new([2, 2], vec![1.0f64, 0.0, 0.0, 0.0]).unwrap();
        let e = edge_map(&f, &Tensor::ones([2, 2])).unwrap();
        assert_eq!(e.values.data()[0], 2.0);
    }

    #[test]
    fn edge_map_rejects_negative_weights() {
        let f = Tensor::<f32>::zeros([2, 2]);
        assert!(matches!(edge_map(&f, &Tensor::full([2, 2], -1.0)), Err(Error::Parameter(_))));
        assert!(matches!(edge_map(&f, &Tensor::ones([2, 3])), Err(Error::Dimension { .. })));
    }

    #[test]
    fn inverse_mean_weights_normalize() {
        let f = Tensor::from_fn([6, 6], |i| ((i * 7) % 5) as f64);
        let wts = WeightMode::InverseMean.weights(&f).unwrap();
        let e = edge_map(&f, &wts).unwrap();
        assert!((e.values.sum() / 36.0 - 1.0).abs() < 1e-12);
        let flat = WeightMode::InverseMean.weights(&Tensor::full([3, 3], 2.0f64)).unwrap();
        assert!(flat.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn median_examples() {
        let m = Tensor::from_fn([5, 4], |i| (i as f64).sin());
        assert_eq!(median_filter(&m, &MedianConfig::new(1).unwrap()).unwrap(), m);
        let c = Tensor::full([4, 4], 2.5f32);
        assert_eq!(median_filter(&c, &MedianConfig::new(3).unwrap()).unwrap(), c);
        let mut spike = Tensor::zeros([3, 3]);
        spike.data_mut()[4] = 9.0f32;
        let out = median_filter(&spike, &MedianConfig::new(3).unwrap()).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn median_border_uses_lower_median() {
        // top-left 3x3 window clips to 2x2 = {1, 2, 4, 5}; lower median is 2
        let m = Tensor::from_fn([3, 3], |i| [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0][i]);
        let out = median_filter(&m, &MedianConfig::new(3).unwrap()).unwrap();
        assert_eq!(out.data()[0], 2.0);
        assert_eq!(out.data()[4], 5.0);
    }

    #[test]
    fn median_mask_only_support() {
        let m = Tensor::new([1, 4], vec![5.0f64, 6.0, 0.0, 0.0]).unwrap();
        let mask = [true, true, false, false];
        let full = MedianConfig::new(3).unwrap();
        let only = full.with_support(MedianSupport::MaskOnly);
        assert_eq!(median_filter_masked(&m, &mask, &full).unwrap().data(), &[5.0, 5.0, 0.0, 0.0]);
        assert_eq!(median_filter_masked(&m, &mask, &only).unwrap().data(), &[5.0, 5.0, 0.0, 0.0]);
        let m = Tensor::new([1, 3], vec![0.0f64, 7.0, 0.0]).unwrap();
        let mask = [false, true, false];
        assert_eq!(median_filter_masked(&m, &mask, &full).unwrap().data(), &[0.0, 0.0, 0.0]);
        assert_eq!(median_filter_masked(&m, &mask, &only).unwrap().data(), &[0.0, 7.0, 0.0]);
    }

    #[test]
    fn median_window_must_be_odd() {
        assert!(MedianConfig::new(4).is_err());
        assert!(MedianConfig::new(0).is_err());
        assert_eq!(MedianConfig::new(5).unwrap().radius(), 2);
    }

    #[test]
    fn project_identity_is_exact() {
        let k = CameraIntrinsics {
            fx: 123.4,
            fy: 98.7,
            cx: 31.3,
            cy: 17.9,
        };
        let ((x, y), z) = project((12.25f64, 40.5), 7.3, &k, &identity3(), &[0.0; 3]).unwrap();
        assert_eq!((x, y, z), (12.25, 40.5, 7.3));
    }

    #[test]
    fn project_forward_translation() {
        let k = CameraIntrinsics {
            fx: 50.0,
            fy: 50.0,
            cx: 32.0,
            cy: 24.0,
        };
        let (d, delta) = (10.0, 2.0);
        let ((x, y), z) = project((42.0f64, 14.0), d, &k, &identity3(), &[0.0, 0.0, delta]).unwrap();
        assert!((z - 12.0).abs() < 1e-12);
        let s = d / (d + delta);
        assert!((x - (32.0 + 10.0 * s)).abs() < 1e-12);
        assert!((y - (24.0 - 10.0 * s)).abs() < 1e-12);
    }

    #[test]
    fn project_behind_camera() {
        let k = CameraIntrinsics::for_resolution(32, 32);
        let r = project((3.0f64, 4.0), 1.0, &k, &identity3(), &[0.0, 0.0, -2.0]);
        assert!(matches!(r, Err(Error::BehindCamera { .. })));
        assert!(project((3.0f64, 4.0), 0.0, &k, &identity3(), &[0.0; 3]).is_err());
    }
}
