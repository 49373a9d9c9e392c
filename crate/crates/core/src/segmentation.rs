//! Panoptic masks and the per-instance binary masks derived from them.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Label id 0 marks pixels with no semantic label.
pub const LABEL_VOID: u16 = 0;

/// Per-pixel `(instance id, label id)` assignment. Instance id 0 means the
/// pixel belongs to no countable instance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PanopticMask {
    height: usize,
    width: usize,
    instance: Vec<u32>,
    label: Vec<u16>,
    label_names: BTreeMap<u16, String>,
}

impl PanopticMask {
    pub fn new(
        height: usize,
        width: usize,
        instance: Vec<u32>,
        label: Vec<u16>,
        label_names: BTreeMap<u16, String>,
    ) -> Result<Self> {
        let n = height * width;
        if instance.len() != n || label.len() != n {
            return Err(Error::dim(
                "panoptic mask",
                format!("{height}x{width} needs {n} ids, got {} / {}", instance.len(), label.len()),
            ));
        }
        let mask = PanopticMask {
            height,
            width,
            instance,
            label,
            label_names,
        };
        mask.instance_labels()?;
        Ok(mask)
    }

    /// Decodes the 16-bit PNG convention: high byte label, low byte instance.
    pub fn from_encoded(
        height: usize,
        width: usize,
        codes: &[u16],
        label_names: BTreeMap<u16, String>,
    ) -> Result<Self> {
        let (label, instance) = codes.iter().map(|&c| decode_pixel(c)).map(|(l, i)| (l, i as u32)).unzip();
        Self::new(height, width, instance, label, label_names)
    }

    pub fn encode(&self) -> Result<Vec<u16>> {
        self.instance
            .iter()
            .zip(&self.label)
            .map(|(&i, &l)| {
                if i > 0xff || l > 0xff {
                    Err(Error::Input(format!("instance {i} / label {l} does not fit the 16-bit encoding")))
                } else {
                    Ok(encode_pixel(l as u8, i as u8))
                }
            })
            .collect()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn instance_ids(&self) -> &[u32] {
        &self.instance
    }

    pub fn labels(&self) -> &[u16] {
        &self.label
    }

    pub fn label_names(&self) -> &BTreeMap<u16, String> {
        &self.label_names
    }

    pub fn label_id(&self, name: &str) -> Option<u16> {
        self.label_names.iter().find(|(_, n)| n.as_str() == name).map(|(&id, _)| id)
    }

    /// Label of every nonzero instance id, ascending by id. Fails if an
    /// instance carries more than one label.
    pub fn instance_labels(&self) -> Result<BTreeMap<u32, u16>> {
        let mut map = BTreeMap::new();
        for (&i, &l) in self.instance.iter().zip(&self.label) {
            if i == 0 {
                continue;
            }
            if let Some(prev) = map.insert(i, l) {
                if prev != l {
                    return Err(Error::Input(format!("instance {i} carries labels {prev} and {l}")));
                }
            }
        }
        Ok(map)
    }
}

pub fn encode_pixel(label: u8, instance: u8) -> u16 {
    (label as u16) << 8 | instance as u16
}

/// `(label, instance)` of a 16-bit panoptic code.
pub fn decode_pixel(code: u16) -> (u16, u8) {
    (code >> 8, (code & 0xff) as u8)
}

/// Binary masks `M_j` for the dynamic instances of one frame, ordered by
/// ascending instance id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstanceMaskSet {
    height: usize,
    width: usize,
    ids: Vec<u32>,
    masks: Vec<Vec<bool>>,
}

impl InstanceMaskSet {
    pub fn empty(height: usize, width: usize) -> Self {
        InstanceMaskSet {
            height,
            width,
            ids: Vec::new(),
            masks: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn instance_ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn mask(&self, j: usize) -> &[bool] {
        &self.masks[j]
    }

    pub fn area(&self, j: usize) -> usize {
        self.masks[j].iter().filter(|&&m| m).count()
    }

    /// `M_j` as a `{0, 1}`-valued `[H, W]` tensor.
    pub fn mask_tensor<T: Scalar>(&self, j: usize) -> Tensor<T> {
        let m = &self.masks[j];
        Tensor::from_fn([self.height, self.width], |i| if m[i] { T::one() } else { T::zero() })
    }

    /// Drops instances covering fewer than `min_area` pixels.
    pub fn retain_min_area(mut self, min_area: usize) -> Self {
        let keep: Vec<bool> = (0..self.len()).map(|j| self.area(j) >= min_area).collect();
        let mut k = keep.iter();
        self.ids.retain(|_| *k.next().unwrap());
        let mut k = keep.iter();
        self.masks.retain(|_| *k.next().unwrap());
        self
    }
}

/// One binary mask per instance whose label name is in `dynamic_labels`;
/// static instances and background produce none.
pub fn extract_instance_masks<S: AsRef<str>>(panoptic: &PanopticMask, dynamic_labels: &[S]) -> InstanceMaskSet {
    let dynamic: BTreeSet<u16> = dynamic_labels
        .iter()
        .filter_map(|name| panoptic.label_id(name.as_ref()))
        .collect();
    let mut by_id: BTreeMap<u32, Vec<bool>> = BTreeMap::new();
    let n = panoptic.height * panoptic.width;
    for (p, (&i, &l)) in panoptic.instance.iter().zip(&panoptic.label).enumerate() {
        if i != 0 && dynamic.contains(&l) {
            by_id.entry(i).or_insert_with(|| vec![false; n])[p] = true;
        }
    }
    let (ids, masks) = by_id.into_iter().unzip();
    InstanceMaskSet {
        height: panoptic.height,
        width: panoptic.width,
        ids,
        masks,
    }
}

/// Degradations applied by [`oracle_panoptic`] to emulate an imperfect
/// segmenter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    /// Boundary morphology radius in pixels (square structuring element):
    /// positive dilates, negative erodes.
    pub morph: i32,
    /// Probability of dropping each instance entirely.
    pub drop_prob: f64,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            morph: 0,
            drop_prob: 0.0,
            seed: 0,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.drop_prob) {
            return Err(Error::Config(format!("drop probability {} outside [0, 1]", self.drop_prob)));
        }
        Ok(())
    }
}

/// Ground-truth panoptic mask of a frame, optionally degraded.
///
/// Dropped and eroded pixels become void (`instance 0`, [`LABEL_VOID`]).
/// Dilation only claims pixels that had no instance; when two instances
/// reach the same pixel the lower id wins.
pub fn oracle_panoptic(truth: &PanopticMask, frame_index: usize, cfg: &OracleConfig) -> Result<PanopticMask> {
    cfg.validate()?;
    let mut out = truth.clone();
    let labels = truth.instance_labels()?;
    if cfg.drop_prob > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(frame_index as u64);
        let dropped: BTreeSet<u32> = labels
            .keys()
            .copied()
            .filter(|_| rng.random::<f64>() < cfg.drop_prob)
            .collect();
        for (i, l) in out.instance.iter_mut().zip(out.label.iter_mut()) {
            if dropped.contains(i) {
                *i = 0;
                *l = LABEL_VOID;
            }
        }
    }
    match cfg.morph {
        0 => {}
        e if e > 0 => dilate(&mut out, e as usize),
        e => erode(&mut out, e.unsigned_abs() as usize),
    }
    Ok(out)
}

fn window(c: usize, r: usize, n: usize) -> std::ops::RangeInclusive<usize> {
    c.saturating_sub(r)..=(c + r).min(n - 1)
}

fn dilate(mask: &mut PanopticMask, r: usize) {
    let (h, w) = (mask.height, mask.width);
    let src_inst = mask.instance.clone();
    let src_label = mask.label.clone();
    let mut claimed = vec![false; h * w];
    let mut order: Vec<usize> = (0..h * w).filter(|&p| src_inst[p] != 0).collect();
    order.sort_by_key(|&p| (src_inst[p], p));
    for p in order {
        let (y, x) = (p / w, p % w);
        for yy in window(y, r, h) {
            for xx in window(x, r, w) {
                let q = yy * w + xx;
                if src_inst[q] == 0 && !claimed[q] {
                    claimed[q] = true;
                    mask.instance[q] = src_inst[p];
                    mask.label[q] = src_label[p];
                }
            }
        }
    }
}

fn erode(mask: &mut PanopticMask, r: usize) {
    let (h, w) = (mask.height, mask.width);
    let src = mask.instance.clone();
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let id = src[p];
            if id == 0 {
                continue;
            }
            let boundary = window(y, r, h).any(|yy| window(x, r, w).any(|xx| src[yy * w + xx] != id));
            if boundary {
                mask.instance[p] = 0;
                mask.label[p] = LABEL_VOID;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names() -> BTreeMap<u16, String> {
        [(1, "ground"), (2, "building"), (3, "sky"), (4, "car"), (5, "person")]
            .into_iter()
            .map(|(k, v)| (k, v.to_string()))
            .collect()
    }

    const DYNAMIC: [&str; 2] = ["car", "person"];

    #[test]
    fn buildings_only_gives_no_masks() {
        let m = PanopticMask::new(2, 2, vec![1, 1, 2, 0], vec![2, 2, 2, 1], names()).unwrap();
        assert!(extract_instance_masks(&m, &DYNAMIC).is_empty());
    }

    #[test]
    fn single_car_mask() {
        let m = PanopticMask::new(2, 2, vec![7, 7, 0, 0], vec![4, 4, 1, 1], names()).unwrap();
        let set = extract_instance_masks(&m, &DYNAMIC);
        assert_eq!(set.len(), 1);
        assert_eq!(set.instance_ids(), &[7]);
        assert_eq!(set.mask_tensor::<f32>(0).data(), &[1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn conflicting_instance_labels_rejected() {
        assert!(PanopticMask::new(1, 2, vec![3, 3], vec![4, 5], names()).is_err());
    }

    #[test]
    fn encoding_splits_bytes() {
        assert_eq!(decode_pixel(0x0305), (3, 5));
        assert_eq!(encode_pixel(3, 5), 0x0305);
        let m = PanopticMask::new(1, 2, vec![5, 0], vec![3, 1], names()).unwrap();
        let codes = m.encode().unwrap();
        assert_eq!(codes, vec![0x0305, 0x0100]);
        assert_eq!(PanopticMask::from_encoded(1, 2, &codes, names()).unwrap(), m);
    }

    #[test]
    fn min_area_filter() {
        let m = PanopticMask::new(1, 4, vec![1, 2, 2, 2], vec![4, 5, 5, 5], names()).unwrap();
        let set = extract_instance_masks(&m, &DYNAMIC).retain_min_area(2);
        assert_eq!(set.instance_ids(), &[2]);
        assert_eq!(set.area(0), 3);
    }

    fn square(h: usize, w: usize, y0: usize, x0: usize, s: usize) -> PanopticMask {
        let mut inst = vec![0; h * w];
        let mut lab = vec![1; h * w];
        for y in y0..y0 + s {
            for x in x0..x0 + s {
                inst[y * w + x] = 1;
                lab[y * w + x] = 4;
            }
        }
        PanopticMask::new(h, w, inst, lab, names()).unwrap()
    }

    #[test]
    fn oracle_identity_and_full_drop() {
        let m = square(6, 6, 1, 1, 3);
        assert_eq!(oracle_panoptic(&m, 0, &OracleConfig::default()).unwrap(), m);
        let cfg = OracleConfig {
            drop_prob: 1.0,
            ..Default::default()
        };
        let d = oracle_panoptic(&m, 0, &cfg).unwrap();
        assert!(extract_instance_masks(&d, &DYNAMIC).is_empty());
    }

    #[test]
    fn dilation_grows_square() {
        let cfg = OracleConfig {
            morph: 1,
            ..Default::default()
        };
        let d = oracle_panoptic(&square(7, 7, 2, 2, 3), 0, &cfg).unwrap();
        let set = extract_instance_masks(&d, &DYNAMIC);
        assert_eq!(set.area(0), 25);
        for y in 0..7 {
            for x in 0..7 {
                assert_eq!(set.mask(0)[y * 7 + x], (1..=5).contains(&y) && (1..=5).contains(&x));
            }
        }
        // clipped at the border
        let d = oracle_panoptic(&square(5, 5, 0, 0, 3), 0, &cfg).unwrap();
        assert_eq!(extract_instance_masks(&d, &DYNAMIC).area(0), 16);
    }

    #[test]
    fn erosion_shrinks_square() {
        let cfg = OracleConfig {
            morph: -1,
            ..Default::default()
        };
        let d = oracle_panoptic(&square(7, 7, 1, 1, 5), 0, &cfg).unwrap();
        assert_eq!(extract_instance_masks(&d, &DYNAMIC).area(0), 9);
    }
}
