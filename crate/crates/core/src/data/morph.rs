//! Binary morphology with a full `m×m` square structuring element.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MorphConfig {
    /// Side of the square structuring element.
    pub m: usize,
}

impl Default for MorphConfig {
    fn default() -> Self {
        MorphConfig { m: 3 }
    }
}

impl MorphConfig {
    pub fn new(m: usize) -> Result<Self> {
        if m == 0 || m.is_multiple_of(2) {
            return Err(Error::invalid(
                "morph",
                format!("structuring element size {m} must be odd and ≥ 1"),
            ));
        }
        Ok(MorphConfig { m })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MorphMode {
    Dilate,
    Erode,
}

pub fn is_binary(t: &Tensor) -> bool {
    t.data().iter().all(|&v| v == 0.0 || v == 1.0)
}

/// Dilation: 1 iff any 1 in the window. Erosion: 1 iff every cell in the
/// window is 1, with cells outside the image counting as 0.
///
/// The square element is separable, so this runs as a row pass then a column pass.
pub fn morph(mask: &Tensor, m: usize, mode: MorphMode) -> Result<Tensor> {
    MorphConfig::new(m)?;
    if !is_binary(mask) {
        return Err(Error::invalid("morph", "input mask is not binary"));
    }
    if mask.rank() < 2 {
        return Err(Error::invalid(
            "morph",
            format!("need at least 2 axes, got {:?}", mask.shape()),
        ));
    }
    let (h, w) = mask.hw();
    let r = (m / 2) as isize;
    let window = |line: &[bool], i: usize| -> bool {
        let range = (i as isize - r)..=(i as isize + r);
        match mode {
            MorphMode::Dilate => range
                .into_iter()
                .any(|j| j >= 0 && (j as usize) < line.len() && line[j as usize]),
            MorphMode::Erode => range
                .into_iter()
                .all(|j| j >= 0 && (j as usize) < line.len() && line[j as usize]),
        }
    };
    let mut out = Vec::with_capacity(mask.numel());
    let mut row = vec![false; w];
    let mut col = vec![false; h];
    for plane in mask.data().chunks(h * w) {
        let mut pass = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                row[x] = plane[y * w + x] == 1.0;
            }
            for x in 0..w {
                pass[y * w + x] = window(&row, x);
            }
        }
        let mut res = vec![0.0; h * w];
        for x in 0..w {
            for y in 0..h {
                col[y] = pass[y * w + x];
            }
            for y in 0..h {
                res[y * w + x] = window(&col, y) as u8 as f64;
            }
        }
        out.extend(res);
    }
    Tensor::new(mask.shape().to_vec(), out)
}

pub fn dilate(mask: &Tensor, m: usize) -> Result<Tensor> {
    morph(mask, m, MorphMode::Dilate)
}

pub fn erode(mask: &Tensor, m: usize) -> Result<Tensor> {
    morph(mask, m, MorphMode::Erode)
}

/// Contour ground truth: `dilate(g_s) − erode(g_s)`.
pub fn contour_from_saliency(g_s: &Tensor, cfg: MorphConfig) -> Result<Tensor> {
    let d = dilate(g_s, cfg.m)?;
    let e = erode(g_s, cfg.m)?;
    let data = d.data().iter().zip(e.data()).map(|(a, b)| a - b).collect();
    Tensor::new(g_s.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, on: impl Fn(usize, usize) -> bool) -> Tensor {
        Tensor::from_fn([1, h, w], |i| on(i / w, i % w) as u8 as f64)
    }

    fn count(t: &Tensor) -> usize {
        t.data().iter().filter(|&&v| v == 1.0).count()
    }

    #[test]
    fn single_pixel() {
        let m = mask(7, 7, |y, x| y == 3 && x == 3);
        let d = dilate(&m, 3).unwrap();
        assert_eq!(
            d,
            mask(7, 7, |y, x| (2..=4).contains(&y) && (2..=4).contains(&x))
        );
        assert_eq!(count(&erode(&m, 3).unwrap()), 0);
    }

    #[test]
    fn erosion_of_all_ones_loses_the_border() {
        let m = mask(5, 6, |_, _| true);
        let e = erode(&m, 3).unwrap();
        assert_eq!(e, mask(5, 6, |y, x| y > 0 && y < 4 && x > 0 && x < 5));
    }

    #[test]
    fn centered_square_gives_forty_pixel_ring() {
        let m = mask(11, 11, |y, x| (3..8).contains(&y) && (3..8).contains(&x));
        let c = contour_from_saliency(&m, MorphConfig::default()).unwrap();
        assert_eq!(count(&c), 40);
        assert!(is_binary(&c));
    }

    #[test]
    fn empty_mask_has_empty_contour() {
        let m = Tensor::zeros([1, 9, 9]);
        assert_eq!(
            count(&contour_from_saliency(&m, MorphConfig::default()).unwrap()),
            0
        );
    }

    #[test]
    fn rejects_even_size_and_non_binary() {
        let m = Tensor::zeros([1, 4, 4]);
        assert!(dilate(&m, 2).is_err());
        assert!(MorphConfig::new(0).is_err());
        let bad = Tensor::full([1, 4, 4], 0.5);
        assert!(erode(&bad, 3).is_err());
    }
}
