mod common;

use common::tiny_spec;
use proptest::prelude::*;
use pyragen_core::apps;
use pyragen_core::backbone::ClassifierSpec;
use pyragen_core::image::{Rect, RegionMask};
use pyragen_core::pyramid::{self, MaskPyramid};
use pyragen_core::rng;

const DRAWS: usize = 10_000;
/// Upper 1% point of chi-squared with 5 degrees of freedom.
const CHI2_5_01: f64 = 15.086;

/// Cells of `level` whose pixel footprint meets `rect`, by rectangle overlap.
fn footprint_oracle(spec: &ClassifierSpec, level: usize, rect: Rect) -> Vec<f32> {
    let side = spec.spatial_side(level);
    let cell = spec.input_size / side;
    let mut out = Vec::with_capacity(side * side);
    for cy in 0..side {
        for cx in 0..side {
            let (x0, y0) = (cx * cell, cy * cell);
            let overlaps = x0 < rect.x + rect.width
                && rect.x < x0 + cell
                && y0 < rect.y + rect.height
                && rect.y < y0 + cell;
            out.push(if overlaps { 0.0 } else { 1.0 });
        }
    }
    out
}

#[test]
fn crop_mode_frequency_and_level_uniformity() {
    let spec = ClassifierSpec::desk(10);
    let mut r = rng::seeded(2024);
    let mut crops = 0usize;
    let mut counts = vec![0usize; spec.num_levels()];
    for _ in 0..DRAWS {
        let d = pyramid::sample_training_masks(&spec, 0.3, &mut r).unwrap();
        crops += d.crop.is_some() as usize;
        counts[d.selected] += 1;
    }
    let freq = crops as f64 / DRAWS as f64;
    assert!((freq - 0.3).abs() <= 0.02, "crop frequency {freq}");
    let expected = DRAWS as f64 / counts.len() as f64;
    let chi2: f64 = counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    assert_eq!(counts.len(), 6);
    assert!(chi2 < CHI2_5_01, "chi2 {chi2} for {counts:?}");
}

#[test]
fn extreme_crop_probabilities() {
    let spec = tiny_spec();
    let mut r = rng::seeded(1);
    for _ in 0..200 {
        assert!(pyramid::sample_training_masks(&spec, 0.0, &mut r)
            .unwrap()
            .crop
            .is_none());
        assert!(pyramid::sample_training_masks(&spec, 1.0, &mut r)
            .unwrap()
            .crop
            .is_some());
    }
    assert!(pyramid::sample_training_masks(&spec, 1.5, &mut r).is_err());
    assert!(pyramid::sample_training_masks(&spec, -0.1, &mut r).is_err());
}

#[test]
fn crop_mode_structure() {
    let spec = ClassifierSpec::desk(10);
    let mut r = rng::seeded(7);
    let mut seen = 0;
    while seen < 500 {
        let d = pyramid::sample_training_masks(&spec, 1.0, &mut r).unwrap();
        let crop = d.crop.unwrap();
        seen += 1;
        assert!(d.masks.is_binary());
        for (i, level) in d.masks.levels.iter().enumerate() {
            let v = level.data.data();
            if i == d.selected {
                assert!(
                    v.iter().all(|&x| x == 1.0),
                    "selected level {i} not all-ones"
                );
            } else if i > d.selected {
                assert!(
                    v.iter().all(|&x| x == 0.0),
                    "deeper level {i} not all-zeros"
                );
            } else if spec.is_spatial(i) {
                assert_eq!(v, footprint_oracle(&spec, i, crop).as_slice(), "level {i}");
            } else {
                assert_eq!(v, [0.0]);
            }
        }
        // the finest level always keeps some cells and blocks others
        if d.selected > 0 {
            let conv1 = d.masks.levels[0].data.data();
            assert!(conv1.contains(&0.0) && conv1.contains(&1.0));
        }
    }
}

#[test]
fn single_level_mode_structure() {
    let spec = ClassifierSpec::desk(10);
    let mut r = rng::seeded(8);
    for _ in 0..300 {
        let d = pyramid::sample_training_masks(&spec, 0.0, &mut r).unwrap();
        assert_eq!(d.masks, MaskPyramid::single_level(&spec, d.selected));
    }
}

proptest! {
    #[test]
    fn crops_respect_the_size_law(seed in any::<u64>(), size in prop::sample::select(vec![16usize, 32, 64, 128])) {
        let mut r = rng::seeded(seed);
        let c = pyramid::sample_crop(size, &mut r);
        prop_assert!(c.width >= size / 4 && c.width <= 3 * size / 4);
        prop_assert!(c.height >= size / 4 && c.height <= 3 * size / 4);
        prop_assert!(c.x + c.width <= size && c.y + c.height <= size);
    }

    #[test]
    fn repaint_masks_shrink_as_the_region_grows(
        seed in any::<u64>(),
        level in 0usize..6,
    ) {
        let spec = ClassifierSpec::desk(10);
        let mut r = rng::seeded(seed);
        let small = pyramid::sample_crop(64, &mut r);
        let grow = Rect::new(
            small.x.saturating_sub(4),
            small.y.saturating_sub(4),
            (small.width + 8).min(64 - small.x.saturating_sub(4)),
            (small.height + 8).min(64 - small.y.saturating_sub(4)),
        );
        let a = apps::repaint_masks(&spec, &RegionMask::from_rect(64, 64, small).unwrap(), level).unwrap();
        let b = apps::repaint_masks(&spec, &RegionMask::from_rect(64, 64, grow).unwrap(), level).unwrap();
        for (la, lb) in a.levels.iter().zip(&b.levels) {
            for (x, y) in la.data.data().iter().zip(lb.data.data()) {
                prop_assert!(y <= x);
            }
        }
    }
}

#[test]
fn rasterization_matches_the_overlap_oracle() {
    let spec = ClassifierSpec::desk(10);
    let mut r = rng::seeded(9);
    for _ in 0..50 {
        let rect = pyramid::sample_crop(64, &mut r);
        let region = RegionMask::from_rect(64, 64, rect).unwrap();
        for level in 0..4 {
            let m = pyramid::rasterize_region_at(&spec, &region, level).unwrap();
            assert_eq!(m.data(), footprint_oracle(&spec, level, rect).as_slice());
        }
        assert_eq!(
            pyramid::rasterize_region(&spec, &region, "fc7")
                .unwrap()
                .data(),
            [0.0]
        );
    }
    let empty = RegionMask::empty(64, 64);
    assert_eq!(
        pyramid::rasterize_region(&spec, &empty, "fc8")
            .unwrap()
            .data(),
        [1.0]
    );
    assert!(pyramid::rasterize_region(&spec, &RegionMask::empty(32, 32), "conv1").is_err());
    assert!(pyramid::rasterize_region(&spec, &empty, "conv9").is_err());
}

#[test]
fn application_mask_recipes() {
    let spec = ClassifierSpec::desk(10);
    for level in 0..spec.num_levels() {
        let m = apps::invert_masks(&spec, level);
        assert_eq!(m.level_sums().iter().filter(|&&s| s > 0.0).count(), 1);
    }
    assert_eq!(
        apps::relabel_masks(&spec),
        apps::invert_masks(&spec, spec.deepest_conv_level())
    );
    assert!(apps::check_region(&RegionMask::empty(8, 8)).is_err());
    assert!(apps::check_region(&RegionMask::full(8, 8)).is_err());
    assert!(
        apps::check_region(&RegionMask::from_rect(8, 8, Rect::new(0, 0, 4, 4)).unwrap()).is_ok()
    );
}
