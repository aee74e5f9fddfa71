mod common;

use common::{random_masks, random_pyramid, rel_err, tiny_spec};
use proptest::prelude::*;
use pyragen_core::image::Image;
use pyragen_core::losses::{self, LossWeights};
use pyragen_core::pyramid::{FeatureLevel, FeaturePyramid, LevelKind, MaskLevel, MaskPyramid};
use pyragen_core::rng;
use pyragen_core::Tensor;

const EPS: f64 = 1e-8;

/// Straight-line reference: normalize jointly by RMS, max-pool 2x2, min-pool
/// the mask, mean absolute difference over the surviving cells.
fn oracle_level(a: &[f64], b: &[f64], shape: &[usize], mask: &[f64], eps: f64) -> f64 {
    let per = a.len();
    let ss: f64 = a.iter().chain(b).map(|v| v * v).sum();
    let denom = (ss / (2 * per) as f64).sqrt() + eps;
    let a: Vec<f64> = a.iter().map(|v| v / denom).collect();
    let b: Vec<f64> = b.iter().map(|v| v / denom).collect();
    let (a, b, m, c) = if shape.len() == 3 && shape[1] >= 2 {
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let (ho, wo) = (h / 2, w / 2);
        let mut pa = vec![f64::NEG_INFINITY; c * ho * wo];
        let mut pb = pa.clone();
        let mut pm = vec![f64::INFINITY; ho * wo];
        for ch in 0..c {
            for y in 0..2 * ho {
                for x in 0..2 * wo {
                    let o = ch * ho * wo + (y / 2) * wo + x / 2;
                    pa[o] = pa[o].max(a[ch * h * w + y * w + x]);
                    pb[o] = pb[o].max(b[ch * h * w + y * w + x]);
                    if ch == 0 {
                        let mo = (y / 2) * wo + x / 2;
                        pm[mo] = pm[mo].min(mask[y * w + x]);
                    }
                }
            }
        }
        (pa, pb, pm, c)
    } else if shape.len() == 3 {
        (a, b, mask.to_vec(), shape[0])
    } else {
        (a, b, mask.to_vec(), 1)
    };
    let mut sum = 0.0;
    let mut count = 0.0;
    if shape.len() == 1 {
        // vector level: one scalar gate for every entry
        sum = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() * m[0];
        count = a.len() as f64 * m[0];
    } else {
        let cells = m.len();
        for ch in 0..c {
            for k in 0..cells {
                sum += (a[ch * cells + k] - b[ch * cells + k]).abs() * m[k];
                count += m[k];
            }
        }
    }
    if count > 0.0 {
        sum / count
    } else {
        0.0
    }
}

fn oracle(fa: &FeaturePyramid, fb: &FeaturePyramid, m: &MaskPyramid, eps: f64) -> f64 {
    fa.levels
        .iter()
        .zip(&fb.levels)
        .zip(&m.levels)
        .map(|((la, lb), lm)| {
            let a: Vec<f64> = la.data.data().iter().map(|&v| v as f64).collect();
            let b: Vec<f64> = lb.data.data().iter().map(|&v| v as f64).collect();
            let mk: Vec<f64> = lm.data.data().iter().map(|&v| v as f64).collect();
            oracle_level(&a, &b, la.data.shape(), &mk, eps)
        })
        .sum()
}

fn single_level(data: Vec<f32>, side: usize) -> (FeaturePyramid, MaskPyramid) {
    let f = FeaturePyramid {
        levels: vec![FeatureLevel {
            id: "x".into(),
            kind: LevelKind::Spatial,
            data: Tensor::from_vec(&[1, side, side], data).unwrap(),
        }],
    };
    let m = MaskPyramid {
        levels: vec![MaskLevel {
            id: "x".into(),
            data: Tensor::ones(&[1, side, side]),
        }],
    };
    (f, m)
}

#[test]
fn lsgan_examples() {
    assert_eq!(losses::lsgan_d_loss(1.0, 0.0), 0.0);
    assert_eq!(losses::lsgan_d_loss(0.0, 1.0), 2.0);
    assert_eq!(losses::lsgan_d_loss(0.5, 0.5), 0.5);
    assert_eq!(losses::lsgan_g_loss(1.0), 0.0);
    assert_eq!(losses::lsgan_g_loss(0.0), 1.0);
    assert_eq!(losses::lsgan_g_loss(-1.0), 4.0);
}

#[test]
fn objective_examples() {
    let w = LossWeights::default();
    assert_eq!(losses::generator_objective(0.0, 0.0, 0.0, &w), 0.0);
    assert!((losses::generator_objective(1.0, 1.0, 1.0, &w) - 1.2).abs() < 1e-12);
    assert!((losses::generator_objective(2.0, 10.0, 0.0, &w) - 3.0).abs() < 1e-12);
}

#[test]
fn loss_weight_validation() {
    assert!(LossWeights::default().validate().is_ok());
    let bad = LossWeights {
        eps_div: 0.0,
        ..LossWeights::default()
    };
    assert!(bad.validate().is_err());
    let bad = LossWeights {
        alpha: -0.1,
        ..LossWeights::default()
    };
    assert!(bad.validate().is_err());
}

#[test]
fn identical_and_fully_masked_are_zero() {
    let spec = tiny_spec();
    let mut r = rng::seeded(1);
    let f = random_pyramid(&spec, &mut r);
    let g = random_pyramid(&spec, &mut r);
    let m = random_masks(&spec, &mut r);
    assert_eq!(losses::reconstruction_loss(&f, &f, &m, EPS).unwrap(), 0.0);
    assert_eq!(
        losses::reconstruction_loss(&f, &g, &MaskPyramid::zeros(&spec), EPS).unwrap(),
        0.0
    );
}

#[test]
fn one_hot_shift_within_window_is_free() {
    let (fa, m) = single_level(vec![1.0, 0.0, 0.0, 0.0], 2);
    let (fb, _) = single_level(vec![0.0, 1.0, 0.0, 0.0], 2);
    assert!(
        losses::reconstruction_loss(&fa, &fb, &m, EPS)
            .unwrap()
            .abs()
            < 1e-12
    );
    // the same shift across a window boundary is not
    let (fa, m) = single_level(
        vec![
            1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
        ],
        4,
    );
    let (fb, _) = single_level(
        vec![
            0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
        ],
        4,
    );
    assert!(losses::reconstruction_loss(&fa, &fb, &m, EPS).unwrap() > 0.1);
}

#[test]
fn hand_computed_single_level() {
    // a = [2, 0 / 0, 0], b = [0, 0 / 0, 1]: RMS = sqrt(5 / 8), pooled |2 - 1| / RMS
    let (fa, m) = single_level(vec![2.0, 0.0, 0.0, 0.0], 2);
    let (fb, _) = single_level(vec![0.0, 0.0, 0.0, 1.0], 2);
    let expected = 1.0 / ((5.0f64 / 8.0).sqrt() + EPS);
    let got = losses::reconstruction_loss(&fa, &fb, &m, EPS).unwrap();
    assert!(rel_err(got, expected) < 1e-12, "{got} vs {expected}");
}

#[test]
fn matches_reference_on_random_pyramids() {
    let spec = tiny_spec();
    let mut r = rng::seeded(2);
    for _ in 0..20 {
        let f = random_pyramid(&spec, &mut r);
        let g = random_pyramid(&spec, &mut r);
        let m = random_masks(&spec, &mut r);
        let got = losses::reconstruction_loss(&f, &g, &m, EPS).unwrap();
        let want = oracle(&f, &g, &m, EPS);
        assert!(rel_err(got, want) < 1e-10, "{got} vs {want}");
    }
}

#[test]
fn scaling_invariance_at_fixed_factors() {
    let spec = tiny_spec();
    let mut r = rng::seeded(3);
    let f = random_pyramid(&spec, &mut r);
    let g = random_pyramid(&spec, &mut r);
    let m = MaskPyramid::ones(&spec);
    let base = losses::reconstruction_loss(&f, &g, &m, EPS).unwrap();
    for c in [0.1f32, 1.0, 7.3, 100.0] {
        let scaled = losses::reconstruction_loss(&f.scaled(c), &g.scaled(c), &m, EPS).unwrap();
        assert!((scaled - base).abs() < 1e-6, "c = {c}: {scaled} vs {base}");
    }
}

#[test]
fn misaligned_pyramids_are_shape_errors() {
    let spec = tiny_spec();
    let mut r = rng::seeded(4);
    let f = random_pyramid(&spec, &mut r);
    let mut g = f.clone();
    g.levels.pop();
    assert!(matches!(
        losses::reconstruction_loss(&f, &g, &MaskPyramid::ones(&spec), EPS),
        Err(pyragen_core::Error::Shape(_))
    ));
}

fn image(v: f32) -> Image {
    Image::filled(2, 2, [v; 3])
}

#[test]
fn diversity_examples() {
    let z = [0.3f32, -1.0, 2.0];
    assert_eq!(
        losses::diversity_loss(&z, &z, &image(0.2), &image(-0.7), 1e-5).unwrap(),
        0.0
    );
    let d = losses::diversity_loss(&[0.0], &[1.0], &image(0.5), &image(0.5), 1e-5).unwrap();
    assert!(rel_err(d, 1e5) < 1e-9);
    let d =
        losses::diversity_loss(&[0.0, 0.0], &[0.5, -0.5], &image(0.0), &image(0.25), 1e-5).unwrap();
    assert!((d - 0.5 / (0.25 + 1e-5)).abs() < 1e-9);
    assert!((d - 2.0).abs() < 1e-3);
    assert!(losses::diversity_loss(&[0.0], &[0.0, 1.0], &image(0.0), &image(0.0), 1e-5).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn reconstruction_is_scale_invariant(seed in any::<u64>(), c in 0.05f32..200.0) {
        let spec = tiny_spec();
        let mut r = rng::seeded(seed);
        let f = random_pyramid(&spec, &mut r);
        let g = random_pyramid(&spec, &mut r);
        let m = random_masks(&spec, &mut r);
        let base = losses::reconstruction_loss(&f, &g, &m, EPS).unwrap();
        let scaled = losses::reconstruction_loss(&f.scaled(c), &g.scaled(c), &m, EPS).unwrap();
        prop_assert!((base - scaled).abs() < 1e-6);
    }

    #[test]
    fn reconstruction_is_nonnegative_and_symmetric(seed in any::<u64>()) {
        let spec = tiny_spec();
        let mut r = rng::seeded(seed);
        let f = random_pyramid(&spec, &mut r);
        let g = random_pyramid(&spec, &mut r);
        let m = random_masks(&spec, &mut r);
        let ab = losses::reconstruction_loss(&f, &g, &m, EPS).unwrap();
        let ba = losses::reconstruction_loss(&g, &f, &m, EPS).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn max_preserving_moves_inside_windows_are_free(seed in any::<u64>(), pos in 0usize..4) {
        // Each 2x2 window holds one positive spike; moving it to `pos` of the
        // same window leaves the pooled maps unchanged.
        let side = 4;
        let mut r = rng::seeded(seed);
        let mut a = vec![0.0f32; side * side];
        let mut b = a.clone();
        for wy in 0..2 {
            for wx in 0..2 {
                let v = rng::uniform(&mut r) as f32 + 0.1;
                let from = rng::int_in(&mut r, 0, 3);
                let at = |p: usize| (2 * wy + p / 2) * side + 2 * wx + p % 2;
                a[at(from)] = v;
                b[at(pos)] = v;
            }
        }
        let (fa, m) = single_level(a, side);
        let (fb, _) = single_level(b, side);
        prop_assert!(losses::reconstruction_loss(&fa, &fb, &m, EPS).unwrap().abs() < 1e-12);
    }

    #[test]
    fn diversity_is_symmetric_and_nonnegative(
        z1 in prop::collection::vec(-3.0f32..3.0, 4),
        z2 in prop::collection::vec(-3.0f32..3.0, 4),
        a in -1.0f32..1.0,
        b in -1.0f32..1.0,
    ) {
        let d1 = losses::diversity_loss(&z1, &z2, &image(a), &image(b), 1e-5).unwrap();
        let d2 = losses::diversity_loss(&z2, &z1, &image(b), &image(a), 1e-5).unwrap();
        prop_assert!(d1 >= 0.0);
        prop_assert_eq!(d1, d2);
    }

    #[test]
    fn lsgan_terms_are_nonnegative(a in -10.0f64..10.0, b in -10.0f64..10.0) {
        prop_assert!(losses::lsgan_d_loss(a, b) >= 0.0);
        prop_assert!(losses::lsgan_g_loss(b) >= 0.0);
    }
}
