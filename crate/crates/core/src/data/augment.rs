use rand::Rng;

use super::{
    contour_from_saliency, resize_bilinear_tensor, resize_nearest_tensor, MorphConfig, Sample,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Random horizontal flip, rotation and border cropping.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub max_rotate_deg: f64,
    /// Largest fraction cut from each border before resizing back.
    pub max_border_crop_frac: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_prob: 0.5,
            max_rotate_deg: 15.0,
            max_border_crop_frac: 0.1,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// No-op configuration.
    pub fn none() -> Self {
        AugmentConfig {
            flip_prob: 0.0,
            max_rotate_deg: 0.0,
            max_border_crop_frac: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::invalid(
                "augment",
                format!("flip_prob {} outside [0,1]", self.flip_prob),
            ));
        }
        if !(0.0..0.5).contains(&self.max_border_crop_frac) {
            return Err(Error::invalid(
                "augment",
                format!(
                    "max_border_crop_frac {} outside [0,0.5)",
                    self.max_border_crop_frac
                ),
            ));
        }
        if !(self.max_rotate_deg >= 0.0 && self.max_rotate_deg.is_finite()) {
            return Err(Error::invalid(
                "augment",
                "max_rotate_deg must be finite and non-negative",
            ));
        }
        Ok(())
    }
}

fn map_planes(t: &Tensor, f: impl Fn(&[f64], usize, usize) -> Vec<f64>) -> Tensor {
    let (h, w) = t.hw();
    let data = t.data().chunks(h * w).flat_map(|p| f(p, h, w)).collect();
    Tensor::new(t.shape().to_vec(), data).expect("plane-wise map keeps shape")
}

fn flip_tensor(t: &Tensor) -> Tensor {
    map_planes(t, |p, h, w| {
        (0..h * w)
            .map(|i| p[(i / w) * w + (w - 1 - i % w)])
            .collect()
    })
}

/// Mirror every map left–right.
pub fn flip_horizontal(s: &Sample) -> Sample {
    Sample {
        rgb: flip_tensor(&s.rgb),
        depth_gt: flip_tensor(&s.depth_gt),
        saliency_gt: flip_tensor(&s.saliency_gt),
        contour_gt: flip_tensor(&s.contour_gt),
        valid_mask: flip_tensor(&s.valid_mask),
    }
}

/// Rotation about the image center by inverse mapping; samples outside the
/// source read as zero.
fn rotate(t: &Tensor, degrees: f64, bilinear: bool) -> Tensor {
    let (sin, cos) = degrees.to_radians().sin_cos();
    map_planes(t, |p, h, w| {
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let at = |y: isize, x: isize| {
            if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                p[y as usize * w + x as usize]
            } else {
                0.0
            }
        };
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let sy = cos * dy - sin * dx + cy;
                let sx = sin * dy + cos * dx + cx;
                out[y * w + x] = if bilinear {
                    let (y0, x0) = (sy.floor(), sx.floor());
                    let (fy, fx) = (sy - y0, sx - x0);
                    let (y0, x0) = (y0 as isize, x0 as isize);
                    (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1))
                        + fy * ((1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1))
                } else {
                    at(sy.round() as isize, sx.round() as isize)
                };
            }
        }
        out
    })
}

fn crop(t: &Tensor, top: usize, bottom: usize, left: usize, right: usize) -> Tensor {
    let (h, w) = t.hw();
    let (nh, nw) = (h - top - bottom, w - left - right);
    let c = t.shape()[0];
    let mut data = Vec::with_capacity(c * nh * nw);
    for p in t.data().chunks(h * w) {
        for y in top..h - bottom {
            data.extend_from_slice(&p[y * w + left..y * w + w - right]);
        }
    }
    Tensor::new(vec![c, nh, nw], data).expect("crop shape")
}

/// Applies one random geometric transform identically to every map.
///
/// RGB and depth are resampled bilinearly, masks by nearest neighbour, and
/// the contour is recomputed from the transformed saliency.
pub fn augment<R: Rng + ?Sized>(
    s: &Sample,
    cfg: &AugmentConfig,
    morph: MorphConfig,
    rng: &mut R,
) -> Result<Sample> {
    cfg.validate()?;
    let flip = rng.random::<f64>() < cfg.flip_prob;
    let angle = if cfg.max_rotate_deg > 0.0 {
        rng.random_range(-cfg.max_rotate_deg..=cfg.max_rotate_deg)
    } else {
        0.0
    };
    let mut fracs = [0.0; 4];
    if cfg.max_border_crop_frac > 0.0 {
        for f in &mut fracs {
            *f = rng.random_range(0.0..cfg.max_border_crop_frac);
        }
    }

    let mut out = if flip { flip_horizontal(s) } else { s.clone() };
    if angle != 0.0 {
        out.rgb = rotate(&out.rgb, angle, true);
        out.depth_gt = rotate(&out.depth_gt, angle, true);
        out.saliency_gt = rotate(&out.saliency_gt, angle, false);
        out.valid_mask = rotate(&out.valid_mask, angle, false);
    }
    let (h, w) = s.size();
    let [t, b, l, r] = [
        (fracs[0] * h as f64) as usize,
        (fracs[1] * h as f64) as usize,
        (fracs[2] * w as f64) as usize,
        (fracs[3] * w as f64) as usize,
    ];
    if t + b + l + r > 0 {
        out.rgb = resize_bilinear_tensor(&crop(&out.rgb, t, b, l, r), h, w);
        out.depth_gt = resize_bilinear_tensor(&crop(&out.depth_gt, t, b, l, r), h, w);
        out.saliency_gt = resize_nearest_tensor(&crop(&out.saliency_gt, t, b, l, r), h, w);
        out.valid_mask = resize_nearest_tensor(&crop(&out.valid_mask, t, b, l, r), h, w);
    }
    // depth is undefined wherever the transform pulled in padding
    out.depth_gt = Tensor::new(
        out.depth_gt.shape().to_vec(),
        out.depth_gt
            .data()
            .iter()
            .zip(out.valid_mask.data())
            .map(|(&d, &v)| d * v)
            .collect(),
    )?;
    out.contour_gt = contour_from_saliency(&out.saliency_gt, morph)?;
    Ok(out)
}
