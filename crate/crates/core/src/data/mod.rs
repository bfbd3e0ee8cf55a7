//! Samples, image IO, morphology, augmentation and synthetic scenes.

mod augment;
mod dataset;
mod morph;
mod pnm;
mod synthetic;

pub use augment::{augment, flip_horizontal, AugmentConfig};
pub use dataset::{load_dataset, load_sample, save_sample, NamedSample};
pub use morph::{contour_from_saliency, dilate, erode, is_binary, morph, MorphConfig, MorphMode};
pub use pnm::{decode_pnm, encode_pnm, load_image, quantize, save_image};
pub use synthetic::{generate_synthetic, render_scene, synthetic_scene, Scene, Shape, ShapeKind};

use crate::error::{Error, Result};
use crate::tensor::kernels;
use crate::tensor::Tensor;

/// RGB image with its aligned depth, saliency and contour ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `3×H×W` in `[0,1]`.
    pub rgb: Tensor,
    /// `1×H×W`, nearer is larger, min–max normalized over valid pixels.
    pub depth_gt: Tensor,
    /// `1×H×W` binary.
    pub saliency_gt: Tensor,
    /// `1×H×W` binary, always `dilate − erode` of `saliency_gt`.
    pub contour_gt: Tensor,
    /// `1×H×W` binary, 1 where the depth sensor returned a value.
    pub valid_mask: Tensor,
}

impl Sample {
    /// Builds a sample from raw depth (0 marks a hole); derives the validity
    /// mask, the normalized depth and the contour ground truth.
    pub fn from_raw(
        rgb: Tensor,
        raw_depth: Option<&Tensor>,
        saliency: Tensor,
        morph: MorphConfig,
    ) -> Result<Self> {
        let (h, w) = check_plane("rgb", &rgb, 3)?;
        let saliency = binarize(&saliency);
        if check_plane("saliency", &saliency, 1)? != (h, w) {
            return Err(Error::shape("sample", rgb.shape(), saliency.shape()));
        }
        let (depth_gt, valid_mask) = match raw_depth {
            Some(raw) => {
                if check_plane("depth", raw, 1)? != (h, w) {
                    return Err(Error::shape("sample", rgb.shape(), raw.shape()));
                }
                normalize_depth(raw)
            }
            None => (Tensor::zeros([1, h, w]), Tensor::zeros([1, h, w])),
        };
        let contour_gt = contour_from_saliency(&saliency, morph)?;
        Ok(Sample {
            rgb,
            depth_gt,
            saliency_gt: saliency,
            contour_gt,
            valid_mask,
        })
    }

    pub fn size(&self) -> (usize, usize) {
        self.rgb.hw()
    }

    /// False when no pixel carries depth (e.g. depth ground truth was not provided).
    pub fn has_depth(&self) -> bool {
        self.valid_mask.data().iter().any(|&v| v > 0.0)
    }

    /// Checks shape agreement, binarity and the contour relation.
    pub fn validate(&self, morph: MorphConfig) -> Result<()> {
        let (h, w) = check_plane("rgb", &self.rgb, 3)?;
        for (name, t) in [
            ("depth", &self.depth_gt),
            ("saliency", &self.saliency_gt),
            ("contour", &self.contour_gt),
            ("valid", &self.valid_mask),
        ] {
            if check_plane(name, t, 1)? != (h, w) {
                return Err(Error::shape("sample", self.rgb.shape(), t.shape()));
            }
        }
        for (name, t) in [
            ("saliency", &self.saliency_gt),
            ("contour", &self.contour_gt),
            ("valid", &self.valid_mask),
        ] {
            if !is_binary(t) {
                return Err(Error::invalid(
                    "sample",
                    format!("{name} map is not binary"),
                ));
            }
        }
        if contour_from_saliency(&self.saliency_gt, morph)? != self.contour_gt {
            return Err(Error::invalid(
                "sample",
                "contour is not dilate − erode of saliency",
            ));
        }
        Ok(())
    }
}

fn check_plane(name: &str, t: &Tensor, channels: usize) -> Result<(usize, usize)> {
    match t.shape() {
        &[c, h, w] if c == channels => Ok((h, w)),
        s => Err(Error::invalid(
            "sample",
            format!("{name} must be {channels}×H×W, got {s:?}"),
        )),
    }
}

fn binarize(t: &Tensor) -> Tensor {
    t.map(|v| (v > 0.5) as u8 as f64)
}

/// Min–max normalizes valid (`> 0`) depth to `[0,1]`; holes become 0.
fn normalize_depth(raw: &Tensor) -> (Tensor, Tensor) {
    let valid = raw.map(|v| (v > 0.0) as u8 as f64);
    let (lo, hi) = raw
        .data()
        .iter()
        .filter(|&&v| v > 0.0)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = hi - lo;
    let depth = raw.map(|v| {
        if v <= 0.0 {
            0.0
        } else if span > 0.0 {
            (v - lo) / span
        } else {
            0.5
        }
    });
    (depth, valid)
}

/// Encodes normalized depth so that valid pixels stay strictly positive on disk.
pub(crate) fn depth_for_storage(s: &Sample) -> Tensor {
    let data = s
        .depth_gt
        .data()
        .iter()
        .zip(s.valid_mask.data())
        .map(|(&d, &v)| {
            if v > 0.0 {
                (1.0 + 254.0 * d) / 255.0
            } else {
                0.0
            }
        })
        .collect();
    Tensor::new(s.depth_gt.shape().to_vec(), data).expect("same shape")
}

pub(crate) fn resize_bilinear_tensor(t: &Tensor, oh: usize, ow: usize) -> Tensor {
    let &[c, h, w] = t.shape() else {
        panic!("expected C×H×W")
    };
    if (h, w) == (oh, ow) {
        return t.clone();
    }
    Tensor::new(
        vec![c, oh, ow],
        kernels::resize_forward(t.data(), c, h, w, oh, ow),
    )
    .expect("resize shape")
}

/// Nearest-neighbour resize with half-pixel centers.
pub(crate) fn resize_nearest_tensor(t: &Tensor, oh: usize, ow: usize) -> Tensor {
    let &[c, h, w] = t.shape() else {
        panic!("expected C×H×W")
    };
    if (h, w) == (oh, ow) {
        return t.clone();
    }
    let pick = |d: usize, src: usize, dst: usize| {
        (((d as f64 + 0.5) * src as f64 / dst as f64).floor() as usize).min(src - 1)
    };
    let mut out = Vec::with_capacity(c * oh * ow);
    for plane in t.data().chunks(h * w) {
        for y in 0..oh {
            let sy = pick(y, h, oh);
            for x in 0..ow {
                out.push(plane[sy * w + pick(x, w, ow)]);
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out).expect("resize shape")
}

/// Resizes every map to `size×size`: bilinear for RGB and depth, nearest for
/// masks, contour recomputed from the resized saliency.
pub fn resize_sample(s: &Sample, size: usize, morph: MorphConfig) -> Result<Sample> {
    if size < 32 || !size.is_multiple_of(32) {
        return Err(Error::invalid(
            "resize_sample",
            format!("size {size} must be a positive multiple of 32"),
        ));
    }
    if s.size() == (size, size) {
        return Ok(s.clone());
    }
    let saliency_gt = resize_nearest_tensor(&s.saliency_gt, size, size);
    Ok(Sample {
        rgb: resize_bilinear_tensor(&s.rgb, size, size),
        depth_gt: resize_bilinear_tensor(&s.depth_gt, size, size),
        contour_gt: contour_from_saliency(&saliency_gt, morph)?,
        saliency_gt,
        valid_mask: resize_nearest_tensor(&s.valid_mask, size, size),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn half_plane(size: usize) -> Tensor {
        Tensor::from_fn([1, size, size], |i| ((i % size) < size / 2) as u8 as f64)
    }

    #[test]
    fn nearest_downscale_keeps_half_plane() {
        let m = half_plane(704);
        let r = resize_nearest_tensor(&m, 352, 352);
        assert_eq!(r, half_plane(352));
    }

    #[test]
    fn resize_sample_identity_and_divisibility() {
        let s = generate_synthetic(3, 64, 64, 3).unwrap();
        assert_eq!(resize_sample(&s, 64, MorphConfig::default()).unwrap(), s);
        assert!(resize_sample(&s, 48, MorphConfig::default()).is_err());
        let up = resize_sample(&s, 128, MorphConfig::default()).unwrap();
        assert_eq!(up.size(), (128, 128));
        up.validate(MorphConfig::default()).unwrap();
    }

    #[test]
    fn raw_depth_normalization_and_holes() {
        let rgb = Tensor::zeros([3, 1, 4]);
        let raw = Tensor::new(vec![1, 1, 4], vec![0.0, 0.2, 0.6, 1.0]).unwrap();
        let sal = Tensor::zeros([1, 1, 4]);
        let s = Sample::from_raw(rgb, Some(&raw), sal, MorphConfig::default()).unwrap();
        assert_eq!(s.valid_mask.data(), &[0.0, 1.0, 1.0, 1.0]);
        assert_eq!(s.depth_gt.data()[0], 0.0);
        assert!((s.depth_gt.data()[1] - 0.0).abs() < 1e-12);
        assert!((s.depth_gt.data()[2] - 0.5).abs() < 1e-12);
        assert!((s.depth_gt.data()[3] - 1.0).abs() < 1e-12);
        assert!(s.has_depth());
    }

    #[test]
    fn mismatched_maps_are_rejected() {
        let rgb = Tensor::zeros([3, 4, 4]);
        let sal = Tensor::zeros([1, 4, 5]);
        assert!(Sample::from_raw(rgb, None, sal, MorphConfig::default()).is_err());
    }
}
