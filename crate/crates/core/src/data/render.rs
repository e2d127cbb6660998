//! Procedural camera and gel-sensor renderings of a latent object.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::labels::{Hardness, Material, Roughness};
use crate::image::ImageObs;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Disc,
    Square,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ObjectSpec {
    pub material: Material,
    pub hardness: Hardness,
    pub roughness: Roughness,
    pub shape: Shape,
    /// Five-way defect label.
    pub defect: &'static str,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderConfig {
    pub size: usize,
    pub noise: f64,
}

const VISION_TEXTURE: f64 = 0.08;
const TACTILE_TEXTURE: f64 = 0.15;
const TACTILE_GROOVE: f64 = 0.45;
const VISION_CUE: f64 = 0.40;

/// Pixels `(y, x)` marked by a defect, or empty for `Normal`.
pub fn cue_pixels(defect: &str, size: usize) -> Vec<(usize, usize)> {
    let s = size as f64;
    let at = |f: f64| ((f * s).round() as usize).min(size - 1);
    let disc = |cx: f64, cy: f64| {
        let (cx, cy, r) = (cx * s, cy * s, 0.09 * s);
        let mut px = Vec::new();
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                if dx * dx + dy * dy <= r * r {
                    px.push((y, x));
                }
            }
        }
        px
    };
    match defect {
        "Scratch-Surface" => (at(0.30)..=at(0.70))
            .flat_map(|i| [(i, i), (i, (i + 1).min(size - 1))])
            .collect(),
        "Scratch-Edge" => (at(0.25)..=at(0.75))
            .flat_map(|x| [(at(0.75), x), ((at(0.75) + 1).min(size - 1), x)])
            .collect(),
        "Dent-Surface" => disc(0.56, 0.56),
        "Dent-Edge" => disc(0.50, 0.72),
        _ => Vec::new(),
    }
}

fn texture(roughness: Roughness, y: usize, x: usize) -> f64 {
    match roughness {
        Roughness::Smooth => 0.0,
        Roughness::Textured => [0.0, 1.0, 0.0, -1.0][x % 4],
        Roughness::Rough => {
            if (x + y) % 2 == 0 {
                1.0
            } else {
                -1.0
            }
        }
    }
}

fn finish<R: Rng + ?Sized>(mut data: Vec<f64>, cfg: &RenderConfig, rng: &mut R) -> ImageObs {
    let noise = Normal::new(0.0, cfg.noise).expect("noise std is finite");
    for v in &mut data {
        let n = if cfg.noise > 0.0 {
            noise.sample(rng)
        } else {
            0.0
        };
        *v = ((*v + n).clamp(0.0, 1.0) * 1e4).round() / 1e4;
    }
    ImageObs::new(cfg.size, cfg.size, data).expect("render buffer matches its size")
}

pub fn render_vision<R: Rng + ?Sized>(
    spec: &ObjectSpec,
    show_cue: bool,
    cfg: &RenderConfig,
    rng: &mut R,
) -> ImageObs {
    let n = cfg.size;
    let s = n as f64;
    let jx = rng.gen_range(-1i32..=1) as f64;
    let jy = rng.gen_range(-1i32..=1) as f64;
    let light = rng.gen_range(-0.03..0.03);
    let (cx, cy) = (0.5 * s + jx, 0.5 * s + jy);
    let fill = spec.material.rgb();
    let mut data = vec![0.45 + light; n * n * 3];
    for y in 0..n {
        for x in 0..n {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let inside = match spec.shape {
                Shape::Disc => dx * dx + dy * dy <= (0.45 * s).powi(2),
                Shape::Square => dx.abs() <= 0.42 * s && dy.abs() <= 0.42 * s,
            };
            if inside {
                let t = VISION_TEXTURE * texture(spec.roughness, y, x);
                for c in 0..3 {
                    data[(y * n + x) * 3 + c] = fill[c] + t + light;
                }
            }
        }
    }
    if show_cue {
        for (y, x) in cue_pixels(spec.defect, n) {
            let i = (y * n + x) * 3;
            let lum = (data[i] + data[i + 1] + data[i + 2]) / 3.0;
            let shift = if lum > 0.5 { -VISION_CUE } else { VISION_CUE };
            for c in 0..3 {
                data[i + c] += shift;
            }
        }
    }
    finish(data, cfg, rng)
}

pub fn render_tactile<R: Rng + ?Sized>(
    spec: &ObjectSpec,
    show_cue: bool,
    cfg: &RenderConfig,
    rng: &mut R,
) -> ImageObs {
    let n = cfg.size;
    let s = n as f64;
    let tint = spec.material.tactile_tint();
    let light = rng.gen_range(-0.02..0.02);
    // Contact imprint: same footprint, hardness sets its contrast.
    let amp = match spec.hardness {
        Hardness::Hard => 0.28,
        Hardness::Soft => 0.06,
    };
    let sigma = 0.22 * s;
    let (bx, by) = (0.5 * s, 0.5 * s);
    let mut data = vec![0.0; n * n * 3];
    for y in 0..n {
        for x in 0..n {
            let (dx, dy) = (x as f64 + 0.5 - bx, y as f64 + 0.5 - by);
            let blob = amp * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            let t = TACTILE_TEXTURE * texture(spec.roughness, y, x);
            for c in 0..3 {
                data[(y * n + x) * 3 + c] = 0.5 + tint[c] + light + blob + t;
            }
        }
    }
    if show_cue {
        for (y, x) in cue_pixels(spec.defect, n) {
            for c in 0..3 {
                data[(y * n + x) * 3 + c] -= TACTILE_GROOVE;
            }
        }
    }
    finish(data, cfg, rng)
}
