use pitta_core::adapt::{total_loss, Lambda, SelectionSpec};
use pitta_core::eval::{aggregate, compute_metrics, Aggregation, EvalConfig, MetricRecord};
use pitta_core::net::{DepthNet, DepthNetConfig};
use pitta_core::scene::{
    apply_domain_shift, dynamic_labels, generate_frame, label_names, CameraIntrinsics, DomainShift, SceneConfig,
    LABEL_BUILDING, LABEL_CAR, LABEL_GROUND, LABEL_PERSON,
};
use pitta_core::segmentation::{extract_instance_masks, PanopticMask};
use pitta_core::signal::{edge_map, identity3, mask_depth, median_filter, project, MedianConfig};
use pitta_core::Tensor64;
use proptest::prelude::*;

fn field(max_side: usize) -> impl Strategy<Value = Tensor64> {
    (1..=max_side, 1..=max_side).prop_flat_map(|(h, w)| {
        prop::collection::vec(-10.0f64..10.0, h * w).prop_map(move |d| Tensor64::new([h, w], d).unwrap())
    })
}

/// Random panoptic maps: instance ids 1..=6 carry car, person or building
/// labels (fixed per id), id 0 is ground.
fn panoptic(max_side: usize) -> impl Strategy<Value = PanopticMask> {
    (1..=max_side, 1..=max_side, prop::array::uniform6(0u8..3)).prop_flat_map(|(h, w, kinds)| {
        prop::collection::vec(0u32..7, h * w).prop_map(move |ids| {
            let label_of = |id: u32| match id {
                0 => LABEL_GROUND,
                i => [LABEL_CAR, LABEL_PERSON, LABEL_BUILDING][kinds[i as usize - 1] as usize],
            };
            let labels = ids.iter().map(|&i| label_of(i)).collect();
            PanopticMask::new(h, w, ids, labels, label_names()).unwrap()
        })
    })
}

fn window_bounds(map: &Tensor64, y: usize, x: usize, r: usize) -> (f64, f64) {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for p in y.saturating_sub(r)..=(y + r).min(h - 1) {
        for q in x.saturating_sub(r)..=(x + r).min(w - 1) {
            lo = lo.min(map.at2(p, q));
            hi = hi.max(map.at2(p, q));
        }
    }
    (lo, hi)
}

proptest! {
    #[test]
    fn edge_map_is_absolutely_homogeneous(f in field(8), c in 0.0f64..20.0) {
        let ones = Tensor64::ones(f.shape().to_vec());
        let base = edge_map(&f, &ones).unwrap();
        let scaled = edge_map(&f.scale(c), &ones).unwrap();
        for (a, b) in scaled.values.data().iter().zip(base.values.data()) {
            prop_assert!((a - c * b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn median_stays_inside_window_range(f in field(9), s in prop::sample::select(vec![1usize, 3, 5, 7])) {
        let out = median_filter(&f, &MedianConfig::new(s).unwrap()).unwrap();
        let (h, w) = f.hw().unwrap();
        for y in 0..h {
            for x in 0..w {
                let (lo, hi) = window_bounds(&f, y, x, s / 2);
                let m = out.at2(y, x);
                prop_assert!(lo <= m && m <= hi);
            }
        }
    }

    #[test]
    fn median_is_idempotent_on_constant_maps(
        h in 1usize..9, w in 1usize..9, v in -5.0f64..5.0, s in prop::sample::select(vec![3usize, 5])
    ) {
        let f = Tensor64::full([h, w], v);
        let cfg = MedianConfig::new(s).unwrap();
        let once = median_filter(&f, &cfg).unwrap();
        prop_assert_eq!(&once, &f);
        prop_assert_eq!(median_filter(&once, &cfg).unwrap(), once);
    }

    #[test]
    fn masked_depth_sums_over_mask_support(p in panoptic(8), seed in any::<u64>()) {
        let masks = extract_instance_masks(&p, &dynamic_labels());
        let (h, w) = (p.height(), p.width());
        let depth = Tensor64::from_fn([h, w], |i| 1.0 + ((seed >> (i % 48)) & 0xff) as f64 / 7.0);
        for (j, m) in mask_depth(&depth, &masks).unwrap().iter().enumerate() {
            let want: f64 = (0..h * w).filter(|&i| masks.mask(j)[i]).map(|i| depth.data()[i]).sum();
            prop_assert_eq!(m.sum(), want);
        }
    }

    #[test]
    fn instance_masks_are_disjoint_complete_and_dynamic(p in panoptic(10)) {
        let masks = extract_instance_masks(&p, &dynamic_labels());
        let n = p.height() * p.width();
        prop_assert!(masks.instance_ids().windows(2).all(|w| w[0] < w[1]));
        for i in 0..n {
            let covering = (0..masks.len()).filter(|&j| masks.mask(j)[i]).count();
            let dynamic = p.instance_ids()[i] != 0 && matches!(p.labels()[i], LABEL_CAR | LABEL_PERSON);
            prop_assert!(covering <= 1);
            prop_assert_eq!(covering == 1, dynamic);
            if covering == 1 {
                let j = (0..masks.len()).find(|&j| masks.mask(j)[i]).unwrap();
                prop_assert_eq!(masks.instance_ids()[j], p.instance_ids()[i]);
            }
        }
        prop_assert_eq!(extract_instance_masks(&p, &dynamic_labels()), masks);
    }

    #[test]
    fn identity_motion_projects_onto_itself(
        fx in 1.0f64..2000.0, fy in 1.0f64..2000.0, cx in -50.0f64..500.0, cy in -50.0f64..500.0,
        x in -100.0f64..700.0, y in -100.0f64..700.0, d in 1e-3f64..1e4,
    ) {
        let k = CameraIntrinsics { fx, fy, cx, cy };
        let ((px, py), z) = project((x, y), d, &k, &identity3(), &[0.0; 3]).unwrap();
        prop_assert_eq!((px, py, z), (x, y, d));
    }

    #[test]
    fn delta_accuracies_are_monotone(
        pairs in prop::collection::vec((1e-3f64..120.0, 1e-2f64..100.0), 1..64)
    ) {
        let n = pairs.len();
        let pred = Tensor64::new([1, n], pairs.iter().map(|p| p.0).collect()).unwrap();
        let gt = Tensor64::new([1, n], pairs.iter().map(|p| p.1).collect()).unwrap();
        let cfg = EvalConfig { exclude_beyond_cap: false, ..Default::default() };
        let m = compute_metrics(&pred, &gt, None, &cfg, "x").unwrap();
        prop_assert!(m.delta1 <= m.delta2 && m.delta2 <= m.delta3 && m.delta3 <= 1.0);
        prop_assert!(m.abs_rel >= 0.0 && m.rmse >= 0.0);
    }

    #[test]
    fn per_frame_aggregate_is_the_frame_mean(
        recs in prop::collection::vec((0.0f64..2.0, 0.0f64..1.0, 1usize..500), 1..20)
    ) {
        let records: Vec<MetricRecord> = recs
            .iter()
            .map(|&(a, d, valid)| MetricRecord {
                abs_rel: a, sq_rel: a * a, rmse: 2.0 * a, rmse_log: a / 2.0,
                delta1: d, delta2: d, delta3: d, valid, domain: "x".into(),
            })
            .collect();
        let agg = aggregate(&records, Aggregation::PerFrame, "x").unwrap();
        let mean = recs.iter().map(|r| r.0).sum::<f64>() / recs.len() as f64;
        prop_assert!((agg.abs_rel - mean).abs() <= 1e-12 * (1.0 + mean));
        prop_assert_eq!(agg.valid, recs.iter().map(|r| r.2).sum::<usize>());
        let pooled = aggregate(&records, Aggregation::Pooled, "x").unwrap();
        let total = agg.valid as f64;
        let weighted = recs.iter().map(|r| r.0 * r.2 as f64 / total).sum::<f64>();
        prop_assert!((pooled.abs_rel - weighted).abs() <= 1e-12 * (1.0 + weighted));
    }

    #[test]
    fn total_loss_decomposes(ld in 0.0f64..1e4, le in 0.0f64..1e4, l in 0.0f64..10.0) {
        let total = total_loss(ld, le, Lambda::Finite(l)).unwrap();
        prop_assert!((total - (ld + l * le)).abs() <= 1e-12 * (1.0 + total));
        prop_assert_eq!(total_loss(ld, le, Lambda::Infinite).unwrap(), le);
        prop_assert_eq!(total_loss(ld, le, Lambda::Finite(0.0)).unwrap(), ld);
    }

    #[test]
    fn lambda_and_selection_strings_round_trip(l in 0.0f64..100.0, c in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        for lambda in [Lambda::Finite(l), Lambda::Infinite] {
            prop_assert_eq!(lambda.to_string().parse::<Lambda>().unwrap(), lambda);
        }
        let spec = SelectionSpec::ConvBn { conv: c, bn: b };
        prop_assert_eq!(spec.to_string().parse::<SelectionSpec>().unwrap(), spec);
    }

    #[test]
    fn domain_shifts_leave_labels_and_depth_alone(
        t in 0usize..40, kind in 0u8..3, strength in 0.0f64..1.0, density in 0.0f64..1.0, factor in 0.0f64..4.0,
    ) {
        let frame = generate_frame(&SceneConfig::with_size(16, 16, 3), t).unwrap();
        let shift = match kind {
            0 => DomainShift::fog(strength),
            1 => DomainShift::Rain { density, seed: t as u64 },
            _ => DomainShift::Brightness { factor },
        };
        let shifted = apply_domain_shift(&frame, &shift).unwrap();
        prop_assert_eq!(&shifted.gt_depth, &frame.gt_depth);
        prop_assert_eq!(&shifted.panoptic, &frame.panoptic);
        prop_assert!(shifted.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn predictions_stay_in_depth_range(seed in any::<u64>(), pixels in prop::collection::vec(0.0f32..=1.0, 16 * 16 * 3)) {
        let cfg = DepthNetConfig { height: 16, width: 16, encoder_channels: vec![4, 8], ..Default::default() };
        let net = DepthNet::<f32>::init_weights(cfg.clone(), seed).unwrap();
        let image = pitta_core::Tensor32::new([16, 16, 3], pixels).unwrap();
        let depth = net.forward(&image).unwrap();
        let (lo, hi) = (cfg.min_depth as f32, cfg.max_depth as f32);
        prop_assert!(depth.data().iter().all(|d| (lo..=hi).contains(d)));
    }
}
