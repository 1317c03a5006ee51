//! Seeded synthetic scenes: a sloped background plane plus axis-aligned
//! rectangles at constant depth, with class-coded colors shaded by inverse
//! depth so the labels and the depth map can both be read off the image.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::SceneSample;
use crate::error::{config_err, Result};
use crate::raster::LabelMap;
use crate::tensor::Tensor;

/// Generator settings. Rectangle corners snap to `grid_snap` pixels so
/// object boundaries sit on positions a stride-aligned head can represent
/// exactly; set it to 1 for free placement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub h: usize,
    pub w: usize,
    pub num_classes: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    pub depth_near: f64,
    pub depth_far: f64,
    /// Frame width receiving the ignore label.
    pub ignore_border: usize,
    pub ignore_label: u32,
    pub grid_snap: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> GenConfig {
        GenConfig {
            h: 64,
            w: 128,
            num_classes: 5,
            objects_min: 2,
            objects_max: 4,
            depth_near: 2.0,
            depth_far: 8.0,
            ignore_border: 2,
            ignore_label: 255,
            grid_snap: 8,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(config_err!("generator needs at least 2 classes"));
        }
        if !(self.depth_near > 0.0 && self.depth_near < self.depth_far) {
            return Err(config_err!(
                "depth range must satisfy 0 < near < far, got ({}, {})",
                self.depth_near,
                self.depth_far
            ));
        }
        if self.objects_min > self.objects_max {
            return Err(config_err!("objects_min exceeds objects_max"));
        }
        if self.grid_snap == 0 {
            return Err(config_err!("grid_snap must be at least 1"));
        }
        if self.h / self.grid_snap < 2 || self.w / self.grid_snap < 2 {
            return Err(config_err!(
                "image {}×{} too small for grid_snap {}",
                self.h,
                self.w,
                self.grid_snap
            ));
        }
        if (self.ignore_label as usize) < self.num_classes {
            return Err(config_err!(
                "ignore label {} collides with class ids 0..{}",
                self.ignore_label,
                self.num_classes
            ));
        }
        if 2 * self.ignore_border >= self.h.min(self.w) {
            return Err(config_err!("ignore border swallows the whole image"));
        }
        Ok(())
    }
}

/// One generated rectangle, nearest-first ordering not implied.
#[derive(Clone, Copy, Debug)]
pub struct SceneObject {
    pub class: u32,
    pub depth: f64,
    pub y0: usize,
    pub x0: usize,
    pub h: usize,
    pub w: usize,
}

impl SceneObject {
    pub fn covers(&self, y: usize, x: usize) -> bool {
        y >= self.y0 && y < self.y0 + self.h && x >= self.x0 && x < self.x0 + self.w
    }
}

/// Background depth at row `y`: a far plane sloping linearly so the value
/// decreases from the bottom row to the top row, always above every
/// object depth.
pub fn background_depth(cfg: &GenConfig, y: usize) -> f64 {
    let top = 1.05 * cfg.depth_far;
    let bottom = 1.6 * cfg.depth_far;
    if cfg.h <= 1 {
        return bottom;
    }
    top + (bottom - top) * y as f64 / (cfg.h - 1) as f64
}

/// Base color of a class, before depth shading. Distinct hues per class;
/// class 0 (the background plane) gets a desaturated tone.
pub fn class_base_color(class: u32) -> [f64; 3] {
    if class == 0 {
        return [0.7, 0.75, 0.8];
    }
    // Golden-ratio hue stepping keeps arbitrary class counts separable.
    let hue = (class as f64 * 0.618_033_988_749_895).fract();
    hsv_to_rgb(hue, 0.85, 1.0)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match (i as i64).rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn shade(cfg: &GenConfig, depth: f64) -> f64 {
    cfg.depth_near / depth
}

/// Quantizes to the 8-bit color grid, so PPM round trips are lossless.
fn quantize_color(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Generates one scene; bitwise deterministic in `cfg` (including the
/// seed). Rectangles are painted far-to-near over the background, so at
/// every pixel the stored label and depth belong to the nearest surface.
pub fn synth_scene(cfg: &GenConfig) -> Result<SceneSample> {
    Ok(synth_scene_with_objects(cfg)?.0)
}

/// [`synth_scene`] plus the generated object list, for invariant checks.
pub fn synth_scene_with_objects(cfg: &GenConfig) -> Result<(SceneSample, Vec<SceneObject>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (h, w) = (cfg.h, cfg.w);
    let snap = cfg.grid_snap;
    let cells_h = h / snap;
    let cells_w = w / snap;

    let count = rng.gen_range(cfg.objects_min..=cfg.objects_max);
    let mut objects = Vec::with_capacity(count);
    for _ in 0..count {
        let class = rng.gen_range(1..cfg.num_classes) as u32;
        let depth = rng.gen_range(cfg.depth_near..cfg.depth_far);
        let max_h_cells = (cells_h / 2).max(2);
        let max_w_cells = (cells_w / 2).max(2);
        let rh = rng.gen_range(2..=max_h_cells);
        let rw = rng.gen_range(2..=max_w_cells);
        let y0 = rng.gen_range(0..=cells_h - rh);
        let x0 = rng.gen_range(0..=cells_w - rw);
        objects.push(SceneObject {
            class,
            depth,
            y0: y0 * snap,
            x0: x0 * snap,
            h: rh * snap,
            w: rw * snap,
        });
    }

    // Paint order: background, then objects far to near.
    let mut order: Vec<usize> = (0..objects.len()).collect();
    order.sort_by(|&a, &b| {
        objects[b]
            .depth
            .partial_cmp(&objects[a].depth)
            .expect("finite depths")
    });

    let mut depth = vec![0.0f64; h * w];
    let mut labels = LabelMap::filled(h, w, 0);
    let mut rgb = vec![0.0f64; 3 * h * w];
    for y in 0..h {
        let bg = background_depth(cfg, y);
        let color = class_base_color(0).map(|c| quantize_color(c * shade(cfg, bg)));
        for x in 0..w {
            depth[y * w + x] = bg;
            for c in 0..3 {
                rgb[c * h * w + y * w + x] = color[c];
            }
        }
    }
    for &idx in &order {
        let obj = &objects[idx];
        let color = class_base_color(obj.class).map(|c| quantize_color(c * shade(cfg, obj.depth)));
        for y in obj.y0..obj.y0 + obj.h {
            for x in obj.x0..obj.x0 + obj.w {
                depth[y * w + x] = obj.depth;
                labels.set(y, x, obj.class);
                for c in 0..3 {
                    rgb[c * h * w + y * w + x] = color[c];
                }
            }
        }
    }

    // Depth passes through the 32-bit on-disk grid so DMAP round trips
    // are bit-exact.
    for v in depth.iter_mut() {
        *v = (*v as f32) as f64;
    }

    let ib = cfg.ignore_border;
    if ib > 0 {
        for y in 0..h {
            for x in 0..w {
                if y < ib || y >= h - ib || x < ib || x >= w - ib {
                    labels.set(y, x, cfg.ignore_label);
                }
            }
        }
    }

    let sample = SceneSample {
        id: format!("scene{:016x}", cfg.seed),
        rgb: Tensor::new(vec![3, h, w], rgb)?,
        depth_gt: Tensor::new(vec![1, h, w], depth)?,
        labels_gt: labels,
    };
    Ok((sample, objects))
}
