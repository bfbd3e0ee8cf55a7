//! Layered random scenes with exact depth, saliency and contour ground truth.
//!
//! A scene is a vertical background gradient plus shapes painted far to
//! near. The nearest shapes are the salient ones and get vivid colours;
//! the rest are muted, so saliency is recoverable from appearance alone.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{MorphConfig, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ShapeKind {
    /// Center and radius in pixels.
    Disk { cy: f64, cx: f64, r: f64 },
    /// Center and half extents in pixels.
    Rect { cy: f64, cx: f64, hh: f64, hw: f64 },
}

impl ShapeKind {
    /// Pixel `(y, x)` is covered when its center lies inside the shape.
    pub fn covers(&self, y: usize, x: usize) -> bool {
        let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
        match *self {
            ShapeKind::Disk { cy, cx, r } => (py - cy).powi(2) + (px - cx).powi(2) <= r * r,
            ShapeKind::Rect { cy, cx, hh, hw } => (py - cy).abs() <= hh && (px - cx).abs() <= hw,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Shape {
    pub kind: ShapeKind,
    pub color: [f64; 3],
    /// Raw depth in `(0,1]`, nearer is larger.
    pub depth: f64,
    pub salient: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub height: usize,
    pub width: usize,
    pub sky: [f64; 3],
    pub ground: [f64; 3],
    /// Raw background depth at the top and bottom rows.
    pub depth_top: f64,
    pub depth_bottom: f64,
    /// Painted in order, so later shapes occlude earlier ones.
    pub shapes: Vec<Shape>,
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Draws a random scene description; deterministic in `seed`.
pub fn synthetic_scene(seed: u64, height: usize, width: usize, n_shapes: usize) -> Result<Scene> {
    if n_shapes == 0 {
        return Err(Error::invalid(
            "generate_synthetic",
            "need at least one shape",
        ));
    }
    if height == 0 || width == 0 {
        return Err(Error::invalid(
            "generate_synthetic",
            "image extent must be positive",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = height.min(width) as f64;
    let n_salient = (n_shapes / 3).max(1);
    let mut shapes = Vec::with_capacity(n_shapes);
    for i in 0..n_shapes {
        let salient = i >= n_shapes - n_salient;
        let cy = rng.random_range(0.2..0.8) * height as f64;
        let cx = rng.random_range(0.2..0.8) * width as f64;
        let kind = if rng.random_bool(0.5) {
            ShapeKind::Disk {
                cy,
                cx,
                r: rng.random_range(0.1..0.22) * side,
            }
        } else {
            ShapeKind::Rect {
                cy,
                cx,
                hh: rng.random_range(0.08..0.2) * side,
                hw: rng.random_range(0.08..0.2) * side,
            }
        };
        let hue = rng.random::<f64>();
        let color = if salient {
            hsv(hue, rng.random_range(0.75..1.0), rng.random_range(0.8..1.0))
        } else {
            // pale distractors above any background brightness; nearer layers are
            // brighter, so their depth order can be read from the image
            hsv(
                hue,
                rng.random_range(0.0..0.25),
                0.7 + 0.25 * (i + 1) as f64 / n_shapes as f64,
            )
        };
        // evenly spaced layers between 0.45 and 0.95
        let depth = 0.45 + 0.5 * (i + 1) as f64 / n_shapes as f64;
        shapes.push(Shape {
            kind,
            color,
            depth,
            salient,
        });
    }
    let sky = hsv(
        rng.random(),
        rng.random_range(0.0..0.3),
        rng.random_range(0.35..0.6),
    );
    let ground = hsv(
        rng.random(),
        rng.random_range(0.0..0.3),
        rng.random_range(0.2..0.45),
    );
    Ok(Scene {
        height,
        width,
        sky,
        ground,
        depth_top: rng.random_range(0.05..0.15),
        depth_bottom: rng.random_range(0.3..0.4),
        shapes,
    })
}

pub fn render_scene(scene: &Scene, morph: MorphConfig) -> Result<Sample> {
    let (h, w) = (scene.height, scene.width);
    let plane = h * w;
    let mut rgb = vec![0.0; 3 * plane];
    let mut depth = vec![0.0; plane];
    let mut saliency = vec![0.0; plane];
    for y in 0..h {
        let t = if h > 1 {
            y as f64 / (h - 1) as f64
        } else {
            0.0
        };
        let d = scene.depth_top + t * (scene.depth_bottom - scene.depth_top);
        for x in 0..w {
            let i = y * w + x;
            for c in 0..3 {
                rgb[c * plane + i] = scene.sky[c] * (1.0 - t) + scene.ground[c] * t;
            }
            depth[i] = d;
        }
    }
    for shape in &scene.shapes {
        for y in 0..h {
            for x in 0..w {
                if shape.kind.covers(y, x) {
                    let i = y * w + x;
                    for c in 0..3 {
                        rgb[c * plane + i] = shape.color[c];
                    }
                    depth[i] = shape.depth;
                    saliency[i] = shape.salient as u8 as f64;
                }
            }
        }
    }
    Sample::from_raw(
        Tensor::new(vec![3, h, w], rgb)?,
        Some(&Tensor::new(vec![1, h, w], depth)?),
        Tensor::new(vec![1, h, w], saliency)?,
        morph,
    )
}

/// Random layered scene rendered to a full [`Sample`]; bit-identical per seed.
pub fn generate_synthetic(
    seed: u64,
    height: usize,
    width: usize,
    n_shapes: usize,
) -> Result<Sample> {
    render_scene(
        &synthetic_scene(seed, height, width, n_shapes)?,
        MorphConfig::default(),
    )
}
