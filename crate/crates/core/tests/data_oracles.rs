//! Contour ground truth and sample invariants against direct window evaluation.

use mmft::data::{self, contour_from_saliency, dilate, erode, generate_synthetic, MorphConfig};
use mmft::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

mod common;

use common::{random_mask, window_morph};

#[test]
fn contour_matches_window_oracle_on_random_masks() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for case in 0..100 {
        let mask = random_mask(&mut rng);
        for m in [1, 3, 5] {
            let (d, e) = window_morph(&mask, m);
            assert_eq!(dilate(&mask, m).unwrap(), d, "case {case} m={m}");
            assert_eq!(erode(&mask, m).unwrap(), e, "case {case} m={m}");
            let want = Tensor::from_fn(mask.shape().to_vec(), |i| d.data()[i] - e.data()[i]);
            assert_eq!(
                contour_from_saliency(&mask, MorphConfig::new(m).unwrap()).unwrap(),
                want,
                "case {case} m={m}"
            );
        }
    }
}

#[test]
fn square_of_side_five_has_forty_contour_pixels() {
    for (h, w, oy, ox) in [(11, 11, 3, 3), (15, 20, 5, 9), (9, 9, 2, 2)] {
        let mask = Tensor::from_fn([1, h, w], |i| {
            let (y, x) = (i / w, i % w);
            ((oy..oy + 5).contains(&y) && (ox..ox + 5).contains(&x)) as u8 as f64
        });
        let c = contour_from_saliency(&mask, MorphConfig::default()).unwrap();
        assert_eq!(c.data().iter().filter(|&&v| v == 1.0).count(), 40);
    }
}

#[test]
fn single_element_gives_empty_contour() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mask = random_mask(&mut rng);
    let c = contour_from_saliency(&mask, MorphConfig::new(1).unwrap()).unwrap();
    assert!(c.data().iter().all(|&v| v == 0.0));
}

#[test]
fn synthetic_samples_are_consistent_and_deterministic() {
    for seed in 0..8 {
        let s = generate_synthetic(seed, 64, 64, 4).unwrap();
        s.validate(MorphConfig::default()).unwrap();
        assert_eq!(s, generate_synthetic(seed, 64, 64, 4).unwrap());
        assert!(s.has_depth());
        assert!(s.saliency_gt.data().contains(&1.0));
        assert!(s.rgb.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let valid = s
            .depth_gt
            .data()
            .iter()
            .zip(s.valid_mask.data())
            .filter(|(_, &m)| m > 0.0);
        let (lo, hi) = valid.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (&d, _)| {
            (lo.min(d), hi.max(d))
        });
        assert!(
            lo.abs() < 1e-12 && (hi - 1.0).abs() < 1e-12,
            "depth range [{lo}, {hi}]"
        );
    }
    assert_ne!(
        generate_synthetic(0, 64, 64, 4).unwrap(),
        generate_synthetic(1, 64, 64, 4).unwrap()
    );
}

#[test]
fn flip_keeps_contour_relation() {
    let s = generate_synthetic(3, 32, 48, 3).unwrap();
    let f = data::flip_horizontal(&s);
    f.validate(MorphConfig::default()).unwrap();
    assert_eq!(data::flip_horizontal(&f), s);
}

proptest! {
    #[test]
    fn contour_is_binary_and_brackets_the_boundary(bits in prop::collection::vec(any::<bool>(), 1..=144), w in 1usize..12) {
        let h = bits.len().div_ceil(w);
        let mask = Tensor::from_fn([1, h, w], |i| bits.get(i).copied().unwrap_or(false) as u8 as f64);
        let e = erode(&mask, 3).unwrap();
        let d = dilate(&mask, 3).unwrap();
        let c = contour_from_saliency(&mask, MorphConfig::default()).unwrap();
        prop_assert!(data::is_binary(&c));
        for i in 0..mask.numel() {
            // erode ⊆ mask ⊆ dilate
            prop_assert!(e.data()[i] <= mask.data()[i] && mask.data()[i] <= d.data()[i]);
        }
        let inverse = mask.map(|v| 1.0 - v);
        // duality away from the border: dilate(M) = 1 − erode(1 − M)
        let dual = erode(&inverse, 3).unwrap();
        for y in 1..h.saturating_sub(1) {
            for x in 1..w.saturating_sub(1) {
                prop_assert_eq!(d.data()[y * w + x], 1.0 - dual.data()[y * w + x]);
            }
        }
    }

    #[test]
    fn pnm_round_trip_is_exact_on_byte_levels(levels in prop::collection::vec(0u8..=255, 12), colour in any::<bool>()) {
        let c = if colour { 3 } else { 1 };
        let n = 12 / c;
        let t = Tensor::from_fn([c, 1, n], |i| levels[i] as f64 / 255.0);
        let bytes = data::encode_pnm(&t).unwrap();
        let back = data::decode_pnm(&bytes, std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(back, t);
    }
}
