use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    label_names, CameraIntrinsics, Frame, ObjectSpec, Range, SceneConfig, LABEL_BUILDING, LABEL_CAR, LABEL_GROUND,
    LABEL_PERSON, LABEL_SKY,
};
use crate::error::Result;
use crate::segmentation::PanopticMask;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Rect,
    Ellipse,
}

/// An object as placed at one time step, with its image-plane footprint.
/// Objects are fronto-parallel, so every covered pixel has depth `depth`.
#[derive(Clone, Debug, PartialEq)]
pub struct PlacedObject {
    pub instance_id: u32,
    pub label: u16,
    pub shape: Shape,
    pub depth: f64,
    /// Lateral position of the centre, metres.
    pub lateral: f64,
    pub width_m: f64,
    pub height_m: f64,
    pub color: [f32; 3],
    pub u_center: f64,
    pub half_width: f64,
    /// Top and bottom image rows (continuous coordinates).
    pub top: f64,
    pub bottom: f64,
}

impl PlacedObject {
    /// Whether the centre of pixel `(row, col)` falls inside the footprint.
    pub fn covers(&self, row: usize, col: usize) -> bool {
        let (vc, uc) = (row as f64 + 0.5, col as f64 + 0.5);
        if vc < self.top || vc > self.bottom {
            return false;
        }
        let dx = (uc - self.u_center) / self.half_width;
        match self.shape {
            Shape::Rect => dx.abs() <= 1.0,
            Shape::Ellipse => {
                let half_h = 0.5 * (self.bottom - self.top);
                let dy = (vc - (self.top + half_h)) / half_h;
                dx * dx + dy * dy <= 1.0
            }
        }
    }
}

struct Blueprint {
    label: u16,
    width: f64,
    height: f64,
    depth: f64,
    lateral: f64,
    speed_x: f64,
    speed_z: f64,
    depth_range: Range<f64>,
    color: [f32; 3],
}

fn sample(rng: &mut ChaCha8Rng, r: Range<f64>) -> f64 {
    if r.max > r.min {
        rng.random_range(r.min..=r.max)
    } else {
        r.min
    }
}

fn blueprint(rng: &mut ChaCha8Rng, spec: &ObjectSpec, label: u16) -> Blueprint {
    let color = match label {
        LABEL_BUILDING => {
            let v = rng.random_range(0.35..0.7f32);
            [v, v * rng.random_range(0.9..1.05f32), v * rng.random_range(0.8..1.0f32)]
        }
        _ => [
            rng.random_range(0.1..0.95f32),
            rng.random_range(0.1..0.95f32),
            rng.random_range(0.1..0.95f32),
        ],
    };
    Blueprint {
        label,
        width: sample(rng, spec.width),
        height: sample(rng, spec.height),
        depth: sample(rng, spec.depth),
        lateral: sample(rng, spec.lateral),
        speed_x: sample(rng, spec.speed_x),
        speed_z: sample(rng, spec.speed_z),
        depth_range: spec.depth,
        color,
    }
}

/// Reflects `z` back into `[lo, hi]` (triangle wave).
fn bounce(z: f64, r: Range<f64>) -> f64 {
    let span = r.max - r.min;
    if span <= 0.0 {
        return r.min;
    }
    let m = (z - r.min).rem_euclid(2.0 * span);
    r.min + if m > span { 2.0 * span - m } else { m }
}

fn layout(cfg: &SceneConfig, episode: u64) -> Vec<Blueprint> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(episode);
    let cat = &cfg.catalog;
    let n_static = rng.random_range(cfg.static_objects.min..=cfg.static_objects.max);
    let n_dynamic = rng.random_range(cfg.dynamic_objects.min..=cfg.dynamic_objects.max);
    let mut out: Vec<Blueprint> = (0..n_static)
        .map(|_| blueprint(&mut rng, &cat.building, LABEL_BUILDING))
        .collect();
    for _ in 0..n_dynamic {
        let bp = if rng.random::<f64>() < cat.person_fraction {
            blueprint(&mut rng, &cat.person, LABEL_PERSON)
        } else {
            blueprint(&mut rng, &cat.car, LABEL_CAR)
        };
        out.push(bp);
    }
    out
}

fn place(bp: &Blueprint, id: u32, tau: f64, cam: &CameraIntrinsics, cam_height: f64) -> PlacedObject {
    let depth = bounce(bp.depth + bp.speed_z * tau, bp.depth_range);
    let lateral = bp.lateral + bp.speed_x * tau;
    let bottom = cam.cy + cam.fy * cam_height / depth;
    PlacedObject {
        instance_id: id,
        label: bp.label,
        shape: if bp.label == LABEL_PERSON { Shape::Ellipse } else { Shape::Rect },
        depth,
        lateral,
        width_m: bp.width,
        height_m: bp.height,
        color: bp.color,
        u_center: cam.cx + cam.fx * lateral / depth,
        half_width: 0.5 * cam.fx * bp.width / depth,
        top: bottom - cam.fy * bp.height / depth,
        bottom,
    }
}

fn shade(c: [f32; 3], k: f32) -> [f32; 3] {
    c.map(|v| (v * k).clamp(0.0, 1.0))
}

/// Colour of an object pixel from object-local metric coordinates.
fn object_color(o: &PlacedObject, row: usize, col: usize, cam: &CameraIntrinsics) -> [f32; 3] {
    let (vc, uc) = (row as f64 + 0.5, col as f64 + 0.5);
    let lx = (uc - (o.u_center - o.half_width)) * o.depth / cam.fx;
    let ly = (o.bottom - vc) * o.depth / cam.fy;
    match o.label {
        LABEL_BUILDING => {
            let wx = lx.rem_euclid(2.5);
            let wy = ly.rem_euclid(3.0);
            if (0.7..1.8).contains(&wx) && (1.0..2.2).contains(&wy) && ly < o.height_m - 0.5 {
                [0.18, 0.22, 0.3]
            } else {
                o.color
            }
        }
        LABEL_CAR => {
            if ly < 0.3 {
                [0.06, 0.06, 0.07]
            } else if ly > 0.6 * o.height_m {
                [0.14, 0.17, 0.22]
            } else {
                o.color
            }
        }
        LABEL_PERSON => {
            if ly > 0.85 * o.height_m {
                [0.86, 0.7, 0.6]
            } else if ly < 0.45 * o.height_m {
                shade(o.color, 0.55)
            } else {
                o.color
            }
        }
        _ => o.color,
    }
}

/// Renders frame `t` and returns the objects in drawing order (far to near).
///
/// Layouts are redrawn every `episode_length` frames; within an episode
/// dynamic objects move with constant lateral speed and bounce in depth.
pub fn render_scene(cfg: &SceneConfig, t: usize) -> Result<(Frame, Vec<PlacedObject>)> {
    cfg.validate()?;
    let cam = cfg.intrinsics();
    let (h, w) = (cfg.height, cfg.width);
    let episode = (t / cfg.episode_length) as u64;
    let tau = (t % cfg.episode_length) as f64;
    let mut objects: Vec<PlacedObject> = layout(cfg, episode)
        .iter()
        .enumerate()
        .map(|(k, bp)| place(bp, k as u32 + 1, tau, &cam, cfg.camera_height))
        .collect();
    objects.sort_by(|a, b| b.depth.total_cmp(&a.depth).then(a.instance_id.cmp(&b.instance_id)));

    let mut image = vec![0f32; h * w * 3];
    let mut depth = vec![0f32; h * w];
    let mut instance = vec![0u32; h * w];
    let mut label = vec![0u16; h * w];

    for row in 0..h {
        let vc = row as f64 + 0.5;
        for col in 0..w {
            let p = row * w + col;
            let (d, l, rgb) = if vc <= cam.cy {
                let a = (vc / cam.cy.max(1.0)) as f32;
                (cfg.far_depth, LABEL_SKY, [0.5 + 0.25 * a, 0.66 + 0.16 * a, 0.9])
            } else {
                let z = cam.fy * cfg.camera_height / (vc - cam.cy);
                if z >= cfg.far_depth {
                    (cfg.far_depth, LABEL_GROUND, [0.5, 0.49, 0.47])
                } else {
                    let x = (col as f64 + 0.5 - cam.cx) * z / cam.fx;
                    let checker = ((x / 2.0).floor() + (z / 2.0).floor()) as i64 % 2 == 0;
                    let lane = x.abs() < 0.12 && z.rem_euclid(4.0) < 2.0;
                    let rgb = if lane {
                        [0.85, 0.85, 0.8]
                    } else if checker {
                        [0.46, 0.44, 0.41]
                    } else {
                        [0.36, 0.35, 0.33]
                    };
                    (z, LABEL_GROUND, rgb)
                }
            };
            depth[p] = d as f32;
            label[p] = l;
            image[p * 3..p * 3 + 3].copy_from_slice(&rgb);
        }
    }

    for o in &objects {
        let r0 = o.top.floor().max(0.0) as usize;
        let r1 = (o.bottom.ceil().max(0.0) as usize).min(h);
        let c0 = (o.u_center - o.half_width).floor().max(0.0) as usize;
        let c1 = ((o.u_center + o.half_width).ceil().max(0.0) as usize).min(w);
        for row in r0..r1 {
            for col in c0..c1 {
                if !o.covers(row, col) {
                    continue;
                }
                let p = row * w + col;
                depth[p] = o.depth as f32;
                instance[p] = o.instance_id;
                label[p] = o.label;
                image[p * 3..p * 3 + 3].copy_from_slice(&object_color(o, row, col, &cam));
            }
        }
    }

    let frame = Frame {
        index: t,
        image: Tensor::new([h, w, 3], image)?,
        gt_depth: Some(Tensor::new([h, w], depth)?),
        panoptic: PanopticMask::new(h, w, instance, label, label_names())?,
        domain: "source".to_owned(),
    };
    Ok((frame, objects))
}

/// Frame `t` of the synthetic stream; deterministic in `(cfg.seed, t)`.
pub fn generate_frame(cfg: &SceneConfig, t: usize) -> Result<Frame> {
    render_scene(cfg, t).map(|(f, _)| f)
}
