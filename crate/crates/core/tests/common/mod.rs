//! Brute-force reference implementations and fixtures shared by the
//! integration suites. Everything here is written from the definitions,
//! without reusing library kernels.

#![allow(dead_code)]

use std::collections::BTreeMap;

use pitta_core::adapt::{build_loss, compute_targets, prepare_frame, resolve_selection, Hyperparams, SelectionSpec};
use pitta_core::net::{pretrain_on_source, DepthNetConfig, ForwardOptions, PretrainConfig, Track};
use pitta_core::scene::PlacedObject;
use pitta_core::scene::{DomainShift, Frame, SceneConfig, SceneStream};
use pitta_core::eval::{compute_metrics, EvalConfig};
use pitta_core::signal::{edge_map, median_filter, median_filter_masked, MedianConfig, MedianSupport};
use pitta_core::tensor::{batch_norm, conv2d, BnMode, Tape};
use pitta_core::{DepthNet64, Tensor64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor64 {
    Tensor64::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Cross-correlation straight from the definition, accumulating each output
/// in `(ky, kx, ci)` order.
pub fn conv2d_oracle(x: &Tensor64, k: &Tensor64, stride: usize, pad: usize) -> Vec<f64> {
    let (h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (ks, cout) = (k.shape()[0], k.shape()[3]);
    let oh = (h + 2 * pad - ks) / stride + 1;
    let ow = (w + 2 * pad - ks) / stride + 1;
    let xv = |y: usize, x_: usize, c: usize| x.data()[(y * w + x_) * cin + c];
    let kv = |a: usize, b: usize, ci: usize, co: usize| k.data()[((a * ks + b) * cin + ci) * cout + co];
    let mut out = Vec::with_capacity(oh * ow * cout);
    for oy in 0..oh {
        for ox in 0..ow {
            for co in 0..cout {
                let mut acc = 0.0;
                for ky in 0..ks {
                    for kx in 0..ks {
                        let iy = (oy * stride + ky) as i64 - pad as i64;
                        let ix = (ox * stride + kx) as i64 - pad as i64;
                        if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                            continue;
                        }
                        for ci in 0..cin {
                            acc += xv(iy as usize, ix as usize, ci) * kv(ky, kx, ci, co);
                        }
                    }
                }
                out.push(acc);
            }
        }
    }
    out
}

/// Per-channel batch normalization; `stats = None` uses the biased batch
/// moments.
pub fn batch_norm_oracle(x: &Tensor64, gamma: &[f64], beta: &[f64], stats: Option<(&[f64], &[f64])>, eps: f64) -> Vec<f64> {
    let c = *x.shape().last().unwrap();
    let n = x.numel() / c;
    let mut out = vec![0.0; x.numel()];
    for ch in 0..c {
        let column: Vec<f64> = (0..n).map(|p| x.data()[p * c + ch]).collect();
        let (mean, var) = match stats {
            Some((m, v)) => (m[ch], v[ch]),
            None => {
                let mean = column.iter().sum::<f64>() / n as f64;
                (mean, column.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64)
            }
        };
        for (p, v) in column.iter().enumerate() {
            out[p * c + ch] = gamma[ch] * (v - mean) / (var + eps).sqrt() + beta[ch];
        }
    }
    out
}

/// `W ⊙ |∇² F|` with the 4-neighbour Laplacian and replicated borders.
pub fn edge_map_oracle(field: &Tensor64, weights: &Tensor64) -> Vec<f64> {
    let (h, w) = (field.shape()[0], field.shape()[1]);
    let f = |y: i64, x: i64| {
        let y = y.clamp(0, h as i64 - 1) as usize;
        let x = x.clamp(0, w as i64 - 1) as usize;
        field.data()[y * w + x]
    };
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let lap = f(y + 1, x) + f(y - 1, x) + f(y, x + 1) + f(y, x - 1) - 4.0 * f(y, x);
            out.push(weights.data()[out.len()] * lap.abs());
        }
    }
    out
}

/// Lower median of every border-clipped `s × s` window, by full sort.
pub fn median_oracle(map: &Tensor64, s: usize) -> Vec<f64> {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let r = (s / 2) as i64;
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let mut window = Vec::new();
            for p in y - r..=y + r {
                for q in x - r..=x + r {
                    if p >= 0 && q >= 0 && p < h as i64 && q < w as i64 {
                        window.push(map.data()[p as usize * w + q as usize]);
                    }
                }
            }
            window.sort_by(f64::total_cmp);
            out.push(window[(window.len() - 1) / 2]);
        }
    }
    out
}

/// `[abs_rel, sq_rel, rmse, rmse_log, δ1, δ2, δ3]` and the valid count.
pub fn metrics_oracle(pred: &[f64], gt: &[f64], cap: f64, exclude_beyond_cap: bool) -> ([f64; 7], usize) {
    let mut sums = [0.0; 7];
    let mut n = 0usize;
    for (&p, &g) in pred.iter().zip(gt) {
        if g <= 0.0 || (exclude_beyond_cap && g >= cap) {
            continue;
        }
        n += 1;
        let p = p.max(1e-3).min(cap);
        let g = g.max(1e-3).min(cap);
        sums[0] += (p - g).abs() / g;
        sums[1] += (p - g) * (p - g) / g;
        sums[2] += (p - g) * (p - g);
        sums[3] += (p.ln() - g.ln()) * (p.ln() - g.ln());
        let ratio = if p > g { p / g } else { g / p };
        sums[4] += f64::from(u8::from(ratio < 1.25));
        sums[5] += f64::from(u8::from(ratio < 1.25 * 1.25));
        sums[6] += f64::from(u8::from(ratio < 1.25 * 1.25 * 1.25));
    }
    let nf = n as f64;
    let mut m = sums.map(|s| s / nf);
    m[2] = m[2].sqrt();
    m[3] = m[3].sqrt();
    (m, n)
}

/// Visible footprint of every placed object: the pixels it covers where no
/// nearer object does. On equal depth the larger instance id is painted last.
pub fn visible_regions(objects: &[PlacedObject], h: usize, w: usize) -> BTreeMap<u32, (u16, Vec<bool>)> {
    let mut regions: BTreeMap<u32, (u16, Vec<bool>)> = objects
        .iter()
        .map(|o| (o.instance_id, (o.label, vec![false; h * w])))
        .collect();
    for row in 0..h {
        for col in 0..w {
            let front = objects
                .iter()
                .filter(|o| o.covers(row, col))
                .min_by(|a, b| a.depth.total_cmp(&b.depth).then(b.instance_id.cmp(&a.instance_id)));
            if let Some(o) = front {
                regions.get_mut(&o.instance_id).unwrap().1[row * w + col] = true;
            }
        }
    }
    regions
}

/// One gradient-check sample: parameter name, flat index, analytic and
/// central-difference derivatives.
#[derive(Debug)]
pub struct GradSample {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradSample {
    pub fn rel_err(&self) -> f64 {
        rel_err(self.analytic, self.numeric)
    }
}

/// The first frame of a foggy 32×32 stream with at least one instance.
pub fn gradcheck_frame(seed: u64, hyper: &Hyperparams) -> Frame {
    let mut scene = SceneConfig::with_size(32, 32, seed);
    scene.dynamic_objects = pitta_core::scene::Range::new(3, 5);
    let stream = SceneStream::new(scene, DomainShift::fog(0.05), 50);
    (0..50)
        .map(|t| stream.frame(t).unwrap())
        .find(|f| !prepare_frame::<f64>(f, hyper).unwrap().masks.is_empty())
        .expect("a frame with instances")
}

/// A 32×32 network in the regime adaptation runs in: initialised from
/// `seed`, then trained for `steps` source steps.
pub fn gradcheck_net(seed: u64, steps: usize) -> DepthNet64 {
    let mut net = DepthNet64::init_weights(DepthNetConfig::with_size(32, 32), seed).unwrap();
    if steps > 0 {
        let scene = SceneConfig::with_size(32, 32, seed + 1);
        let cfg = PretrainConfig {
            steps,
            ..Default::default()
        };
        pretrain_on_source(&mut net, &scene, &cfg).unwrap();
    }
    net
}

/// Outcome of [`pipeline_gradcheck`].
#[derive(Debug)]
pub struct GradCheck {
    pub samples: Vec<GradSample>,
    /// Drawn entries whose `±h` stencil crossed a kink and were replaced.
    pub redrawn: usize,
}

/// Compares `∇_θ L` from the tape against central differences of the full
/// pipeline loss, with pseudo-labels and depth weights frozen at the
/// unperturbed prediction, on `samples` distinct random θ entries.
///
/// With `smooth_only`, an entry is redrawn when moving it by `±h` flips the
/// side of any abs, ReLU or clamp input that is off its kink at θ: the
/// difference quotient then spans two linear pieces and measures neither.
pub fn pipeline_gradcheck(
    net: &DepthNet64,
    seed: u64,
    hyper: &Hyperparams,
    h: f64,
    samples: usize,
    smooth_only: bool,
) -> GradCheck {
    let mut net = net.clone();
    let mut r = rng(seed ^ 0x9e37);
    resolve_selection(&SelectionSpec::BnEncoderAll, net.params_mut()).unwrap();
    let frame = gradcheck_frame(seed, hyper);
    let inputs = prepare_frame::<f64>(&frame, hyper).unwrap();
    let targets = compute_targets(&net.forward(&inputs.image).unwrap(), &inputs.masks, hyper).unwrap();
    let opts = ForwardOptions {
        bn_mode: BnMode::Eval,
        track: Track::Adaptable,
    };

    let loss = |net: &DepthNet64| -> (f64, Vec<i8>) {
        let mut tape = Tape::new();
        let trace = net.forward_on_tape(&mut tape, &inputs.image, opts).unwrap();
        let graph = build_loss(&mut tape, trace.depth, &inputs, &targets, hyper).unwrap();
        (tape.value(graph.total).item().unwrap(), tape.branch_signs())
    };

    let mut tape = Tape::new();
    let trace = net.forward_on_tape(&mut tape, &inputs.image, opts).unwrap();
    let graph = build_loss(&mut tape, trace.depth, &inputs, &targets, hyper).unwrap();
    let grads = tape.backward(graph.total).unwrap();
    let centre = tape.branch_signs();

    let mut candidates: Vec<(usize, usize)> = net
        .params()
        .entries()
        .iter()
        .enumerate()
        .filter(|(_, e)| e.adaptable)
        .flat_map(|(i, e)| (0..e.tensor.numel()).map(move |k| (i, k)))
        .collect();
    let mut check = GradCheck {
        samples: Vec::new(),
        redrawn: 0,
    };
    while check.samples.len() < samples && !candidates.is_empty() {
        let (i, k) = candidates.swap_remove(r.random_range(0..candidates.len()));
        let shifted = |delta: f64| {
            let mut n = net.clone();
            n.params_mut().entries_mut()[i].tensor.data_mut()[k] += delta;
            loss(&n)
        };
        let ((up, up_signs), (down, down_signs)) = (shifted(h), shifted(-h));
        let crosses = centre
            .iter()
            .zip(up_signs.iter().zip(&down_signs))
            .any(|(&c, (&u, &d))| c != 0 && (u != c || d != c));
        if smooth_only && crosses {
            check.redrawn += 1;
            continue;
        }
        check.samples.push(GradSample {
            param: net.params().entries()[i].name.clone(),
            index: k,
            analytic: grads.get_or_zeros(&tape, trace.params[i])[k],
            numeric: (up - down) / (2.0 * h),
        });
    }
    check
}

/// Totals from [`check_instance_masks`].
#[derive(Debug, Default)]
pub struct MaskAudit {
    pub frames: usize,
    pub instances: usize,
    pub pixels: usize,
}

/// Compares the extracted instance masks of frames `0..frames` against the
/// renderer's visible dynamic-object regions: equal pixel sets, pairwise
/// disjoint, and never on a static or background label.
pub fn check_instance_masks(scene: &SceneConfig, frames: usize) -> Result<MaskAudit, String> {
    let dynamic = pitta_core::scene::dynamic_labels();
    let names = pitta_core::scene::label_names();
    let mut audit = MaskAudit::default();
    for t in 0..frames {
        let (frame, objects) = pitta_core::scene::render_scene(scene, t).map_err(|e| e.to_string())?;
        let (h, w) = (frame.height(), frame.width());
        let masks = pitta_core::segmentation::extract_instance_masks(&frame.panoptic, &dynamic);
        let expected: BTreeMap<u32, Vec<bool>> = visible_regions(&objects, h, w)
            .into_iter()
            .filter(|(_, (label, region))| dynamic.contains(&names[label]) && region.iter().any(|&v| v))
            .map(|(id, (_, region))| (id, region))
            .collect();
        let got: BTreeMap<u32, Vec<bool>> = masks
            .instance_ids()
            .iter()
            .enumerate()
            .map(|(j, &id)| (id, masks.mask(j).to_vec()))
            .collect();
        if got.keys().ne(expected.keys()) {
            return Err(format!(
                "frame {t}: instances {:?} vs visible {:?}",
                got.keys().collect::<Vec<_>>(),
                expected.keys().collect::<Vec<_>>()
            ));
        }
        for (id, region) in &expected {
            if &got[id] != region {
                let diff = got[id].iter().zip(region).filter(|(a, b)| a != b).count();
                return Err(format!("frame {t}: instance {id} differs on {diff} pixels"));
            }
        }
        for p in 0..h * w {
            let covering = got.values().filter(|m| m[p]).count();
            if covering > 1 {
                return Err(format!("frame {t}: pixel {p} in {covering} masks"));
            }
            if covering == 1 && !dynamic.contains(&names[&frame.panoptic.labels()[p]]) {
                return Err(format!("frame {t}: mask covers static pixel {p}"));
            }
        }
        audit.frames += 1;
        audit.instances += got.len();
        audit.pixels += got.values().flatten().filter(|&&v| v).count();
    }
    Ok(audit)
}

fn close_all(got: &[f64], want: &[f64], tol: f64, what: &str) -> Result<(), String> {
    if got.len() != want.len() {
        return Err(format!("{what}: {} values vs {}", got.len(), want.len()));
    }
    match got.iter().zip(want).position(|(g, w)| rel_err(*g, *w) > tol) {
        Some(i) => Err(format!("{what}[{i}]: {} vs {}", got[i], want[i])),
        None => Ok(()),
    }
}

/// `conv2d` on random shapes, strides and paddings; must be bit-identical.
pub fn audit_conv2d(seed: u64, instances: usize) -> Result<(), String> {
    let mut r = rng(seed);
    for _ in 0..instances {
        let k = [1, 3, 5][r.random_range(0..3)];
        let (h, w) = (r.random_range(k..9), r.random_range(k..9));
        let (cin, cout) = (r.random_range(1..4), r.random_range(1..4));
        let (stride, pad) = (r.random_range(1..3), r.random_range(0..=k / 2));
        let x = random_tensor(&mut r, &[h, w, cin], -2.0, 2.0);
        let kernel = random_tensor(&mut r, &[k, k, cin, cout], -1.0, 1.0);
        let got = conv2d(&x, &kernel, stride, pad).map_err(|e| e.to_string())?;
        if got.data() != conv2d_oracle(&x, &kernel, stride, pad).as_slice() {
            return Err(format!("conv2d differs for {h}x{w}x{cin} k={k} stride={stride} pad={pad}"));
        }
    }
    Ok(())
}

/// `batch_norm` in both modes, including the running-statistics update.
pub fn audit_batch_norm(seed: u64, instances: usize) -> Result<(), String> {
    let mut r = rng(seed);
    for _ in 0..instances {
        let (h, w, c) = (r.random_range(1..7), r.random_range(2..7), r.random_range(1..5));
        let x = random_tensor(&mut r, &[h, w, c], -3.0, 3.0);
        let gamma = random_tensor(&mut r, &[c], -2.0, 2.0);
        let beta = random_tensor(&mut r, &[c], -1.0, 1.0);
        let mut mean = random_tensor(&mut r, &[c], -1.0, 1.0);
        let mut var = random_tensor(&mut r, &[c], 0.1, 3.0);
        let (eps, momentum) = (1e-5, 0.1);
        let mode = if r.random_bool(0.5) { BnMode::Train } else { BnMode::Eval };
        let (m0, v0) = (mean.clone(), var.clone());
        let got = batch_norm(&x, &gamma, &beta, &mut mean, &mut var, eps, momentum, mode).map_err(|e| e.to_string())?;
        let stats = (mode == BnMode::Eval).then_some((m0.data(), v0.data()));
        close_all(got.data(), &batch_norm_oracle(&x, gamma.data(), beta.data(), stats, eps), 1e-9, "batch_norm")?;
        let (want_mean, want_var): (Vec<f64>, Vec<f64>) = match mode {
            BnMode::Eval => (m0.data().to_vec(), v0.data().to_vec()),
            BnMode::Train => {
                let n = (h * w) as f64;
                (0..c)
                    .map(|ch| {
                        let col: Vec<f64> = (0..h * w).map(|p| x.data()[p * c + ch]).collect();
                        let mu = col.iter().sum::<f64>() / n;
                        let unbiased = col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (n - 1.0);
                        (
                            (1.0 - momentum) * m0.data()[ch] + momentum * mu,
                            (1.0 - momentum) * v0.data()[ch] + momentum * unbiased,
                        )
                    })
                    .unzip()
            }
        };
        close_all(mean.data(), &want_mean, 1e-9, "running mean")?;
        close_all(var.data(), &want_var, 1e-9, "running var")?;
    }
    Ok(())
}

pub fn audit_edge_map(seed: u64, instances: usize) -> Result<(), String> {
    let mut r = rng(seed);
    for _ in 0..instances {
        let (h, w) = (r.random_range(1..10), r.random_range(1..10));
        let field = random_tensor(&mut r, &[h, w], -5.0, 5.0);
        let weights = random_tensor(&mut r, &[h, w], 0.0, 2.0);
        let got = edge_map(&field, &weights).map_err(|e| e.to_string())?;
        close_all(got.values.data(), &edge_map_oracle(&field, &weights), 1e-12, "edge_map")?;
    }
    Ok(())
}

/// Full-window medians on maps with ties and zeros, then mask-restricted
/// medians; both must be exact.
pub fn audit_median(seed: u64, instances: usize) -> Result<(), String> {
    let mut r = rng(seed);
    for _ in 0..instances {
        let (h, w) = (r.random_range(1..10), r.random_range(1..10));
        let s = [1, 3, 5, 7][r.random_range(0..4)];
        let map = Tensor64::from_fn([h, w], |_| {
            if r.random_bool(0.3) {
                0.0
            } else {
                f64::from(r.random_range(1..6u8))
            }
        });
        let got = median_filter(&map, &MedianConfig::new(s).unwrap()).map_err(|e| e.to_string())?;
        if got.data() != median_oracle(&map, s).as_slice() {
            return Err(format!("median differs for {h}x{w} s={s}"));
        }

        let mask: Vec<bool> = (0..h * w).map(|_| r.random_bool(0.6)).collect();
        let masked = Tensor64::from_fn([h, w], |i| if mask[i] { r.random_range(1.0..9.0) } else { 0.0 });
        let cfg = MedianConfig::new(s).unwrap().with_support(MedianSupport::MaskOnly);
        let got = median_filter_masked(&masked, &mask, &cfg).map_err(|e| e.to_string())?;
        let rad = (s / 2) as i64;
        for p in 0..h * w {
            let (y, x) = ((p / w) as i64, (p % w) as i64);
            let mut window: Vec<f64> = (y - rad..=y + rad)
                .flat_map(|a| (x - rad..=x + rad).map(move |b| (a, b)))
                .filter(|&(a, b)| a >= 0 && b >= 0 && a < h as i64 && b < w as i64)
                .map(|(a, b)| a as usize * w + b as usize)
                .filter(|&q| mask[q])
                .map(|q| masked.data()[q])
                .collect();
            window.sort_by(f64::total_cmp);
            let want = if mask[p] { window[(window.len() - 1) / 2] } else { 0.0 };
            if got.data()[p] != want {
                return Err(format!("mask-only median differs at {p} for {h}x{w} s={s}"));
            }
        }
    }
    Ok(())
}

/// Random 8×8 maps with unmeasured (0) and capped (80) ground truth, under
/// both cap-exclusion settings.
pub fn audit_metrics(seed: u64, instances: usize) -> Result<(), String> {
    let mut r = rng(seed);
    for i in 0..instances {
        let exclude = i % 2 == 0;
        let gt = Tensor64::from_fn([8, 8], |_| match r.random_range(0..10) {
            0 => 0.0,
            1 => 80.0,
            _ => r.random_range(0.5..90.0),
        });
        let pred = Tensor64::from_fn([8, 8], |_| r.random_range(1e-4..100.0));
        let cfg = EvalConfig {
            exclude_beyond_cap: exclude,
            ..Default::default()
        };
        let (want, n) = metrics_oracle(pred.data(), gt.data(), cfg.depth_cap, exclude);
        let got = compute_metrics(&pred, &gt, None, &cfg, "x").map_err(|e| e.to_string())?;
        if got.valid != n {
            return Err(format!("valid count {} vs {n}", got.valid));
        }
        close_all(&got.values(), &want, 1e-6, "metrics")?;
    }
    Ok(())
}
