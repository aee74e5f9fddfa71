mod common;

use common::{tiny_dataset, tiny_model};
use pyragen_core::apps;
use pyragen_core::data::ClassLabel;
use pyragen_core::eval::{self, ReportConfig};
use pyragen_core::image::{Image, Rect, RegionMask};
use pyragen_core::Error;

fn source(i: usize) -> Image {
    tiny_dataset(2, 11).get(i).0.clone()
}

fn same_pixels(a: &[Image], b: &[Image]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.pixels()
                .iter()
                .zip(y.pixels())
                .all(|(p, q)| p.to_bits() == q.to_bits())
        })
}

#[test]
fn invert_is_seeded_and_sized() {
    let model = tiny_model(1);
    let im = source(0);
    let a = apps::invert_at_level(&model, &im, "conv2", 4, 9, Some(ClassLabel(2))).unwrap();
    let b = apps::invert_at_level(&model, &im, "conv2", 4, 9, Some(ClassLabel(2))).unwrap();
    let c = apps::invert_at_level(&model, &im, "conv2", 4, 10, Some(ClassLabel(2))).unwrap();
    assert_eq!(a.samples.len(), 4);
    assert!(same_pixels(&a.samples, &b.samples));
    assert!(!same_pixels(&a.samples, &c.samples));
    assert_eq!(a.provenance, b.provenance);
    assert_eq!(a.provenance.operation, "invert");
    assert_eq!(
        (
            a.provenance.level.as_str(),
            a.provenance.label,
            a.provenance.seed
        ),
        ("conv2", 2, 9)
    );
    assert_eq!(a.provenance.mask_hash.len(), 64);
    assert_ne!(
        a.provenance.mask_hash,
        apps::invert_at_level(&model, &im, "fc8", 1, 9, None)
            .unwrap()
            .provenance
            .mask_hash
    );
    for s in &a.samples {
        assert_eq!((s.width(), s.height()), (16, 16));
    }
}

#[test]
fn larger_requests_extend_smaller_ones() {
    // samples are drawn in chunks; the chunking must not change earlier samples
    let model = tiny_model(2);
    let im = source(1);
    let few = apps::invert_at_level(&model, &im, "conv1", 3, 4, None).unwrap();
    let many = apps::invert_at_level(&model, &im, "conv1", 11, 4, None).unwrap();
    for (a, b) in few.samples.iter().zip(&many.samples) {
        assert!(a.mean_abs_diff(b) < 1e-5);
    }
}

#[test]
fn omitted_labels_come_from_the_classifier() {
    let model = tiny_model(3);
    let im = source(2);
    let predicted = pyragen_core::backbone::predict(&model.classifier, &im).unwrap();
    let g = apps::invert_at_level(&model, &im, "fc7", 1, 0, None).unwrap();
    assert_eq!(g.provenance.label, predicted);
}

#[test]
fn square_inputs_of_other_sizes_are_resized() {
    let model = tiny_model(4);
    let big = source(0).resize_bilinear(40, 40);
    let g = apps::invert_at_level(&model, &big, "conv1", 2, 0, None).unwrap();
    assert_eq!((g.samples[0].width(), g.samples[0].height()), (16, 16));
    let region = RegionMask::from_rect(40, 40, Rect::new(0, 0, 20, 12)).unwrap();
    assert!(apps::repaint(&model, &big, &region, "conv2", 1, 0, None).is_ok());
    let wide = source(0).resize_bilinear(40, 24);
    assert!(matches!(
        apps::invert_at_level(&model, &wide, "conv1", 1, 0, None),
        Err(Error::Preprocess(_))
    ));
}

#[test]
fn application_errors() {
    let model = tiny_model(5);
    let im = source(0);
    assert!(matches!(
        apps::invert_at_level(&model, &im, "conv7", 1, 0, None),
        Err(Error::UnknownLevel(_))
    ));
    assert!(apps::invert_at_level(&model, &im, "conv1", 0, 0, None).is_err());
    assert!(apps::invert_at_level(&model, &im, "conv1", 1, 0, Some(ClassLabel(3))).is_err());
    assert!(apps::relabel(&model, &im, ClassLabel(9), 1, 0).is_err());
    let mut nan = im.clone();
    nan.pixels_mut()[0] = f32::NAN;
    assert!(apps::invert_at_level(&model, &nan, "conv1", 1, 0, None).is_err());
    assert!(apps::composite(
        &model,
        &im,
        &im.crop(Rect::new(0, 0, 8, 8)).unwrap(),
        Rect::new(12, 12, 8, 8),
        "conv2",
        1,
        0,
        None
    )
    .is_err());
}

#[test]
fn repaint_and_composite_record_their_masks() {
    let model = tiny_model(6);
    let im = source(3);
    let region = RegionMask::from_rect(16, 16, Rect::new(0, 0, 8, 8)).unwrap();
    let r = apps::repaint(&model, &im, &region, "conv2", 2, 1, None).unwrap();
    let masks = apps::repaint_masks(model.spec(), &region, 1).unwrap();
    assert_eq!(
        r.provenance.mask_hash,
        pyragen_core::params::hex_digest(&masks.digest())
    );
    assert_eq!(r.provenance.operation, "repaint");

    let patch = source(4).crop(Rect::new(4, 4, 8, 8)).unwrap();
    let c = apps::composite(
        &model,
        &im,
        &patch,
        Rect::new(0, 0, 8, 8),
        "conv2",
        2,
        1,
        None,
    )
    .unwrap();
    assert_eq!(c.provenance.mask_hash, r.provenance.mask_hash);
    assert_eq!(c.provenance.operation, "composite");
}

#[test]
fn composite_takes_only_the_selected_level_from_the_paste() {
    let model = tiny_model(7);
    let base = pyragen_core::backbone::extract_features(&model.classifier, &source(0)).unwrap();
    let pasted = pyragen_core::backbone::extract_features(&model.classifier, &source(1)).unwrap();
    let mixed = apps::composite_features(&base, &pasted, 2).unwrap();
    for (i, level) in mixed.levels.iter().enumerate() {
        let want = if i == 2 {
            &pasted.levels[i]
        } else {
            &base.levels[i]
        };
        assert_eq!(level, want);
    }
    assert!(apps::composite_features(&base, &pasted, 4).is_err());
}

#[test]
fn relabel_uses_the_deepest_conv_level() {
    let model = tiny_model(8);
    let im = source(0);
    let r = apps::relabel(&model, &im, ClassLabel(1), 3, 2).unwrap();
    assert_eq!(
        (r.provenance.level.as_str(), r.provenance.label),
        ("conv2", 1)
    );
    let inv = apps::invert_at_level(&model, &im, "conv2", 3, 2, Some(ClassLabel(1))).unwrap();
    assert!(same_pixels(&r.samples, &inv.samples));
    assert_eq!(r.provenance.mask_hash, inv.provenance.mask_hash);
}

#[test]
fn degenerate_regions_are_accepted_by_the_library() {
    let model = tiny_model(9);
    let im = source(0);
    let empty = RegionMask::empty(16, 16);
    assert!(apps::check_region(&empty).is_err());
    assert!(apps::repaint(&model, &im, &empty, "conv2", 1, 0, None).is_ok());
}

#[test]
fn per_level_report_on_an_untrained_model() {
    let model = tiny_model(10);
    let images: Vec<Image> = tiny_dataset(2, 12).images().cloned().collect();
    let cfg = ReportConfig {
        fid_samples: 6,
        diversity_images: 2,
        k_per_image: 3,
        seed: 1,
    };
    let levels = vec!["fc8".to_string(), "conv1".to_string(), "conv1".to_string()];
    let report = eval::per_level_report(&model, &images, &levels, &cfg).unwrap();
    let names: Vec<&str> = report.rows.iter().map(|r| r.level.as_str()).collect();
    assert_eq!(names, ["conv1", "fc8"]);
    for r in &report.rows {
        assert!(r.fid.is_finite() && r.fid >= 0.0);
        assert!(r.diversity.is_finite() && r.diversity >= 0.0);
    }
    assert_eq!(
        report,
        eval::per_level_report(&model, &images, &levels, &cfg).unwrap()
    );
    let tsv = report.to_tsv();
    assert!(tsv.starts_with("level\tfid\tdiversity\nconv1\t"));
    assert_eq!(tsv.lines().count(), 3);
    assert!(eval::per_level_report(&model, &images, &["pool5".to_string()], &cfg).is_err());
}

#[test]
fn fid_of_a_set_with_itself_is_zero() {
    let model = tiny_model(11);
    let images: Vec<Image> = tiny_dataset(3, 13).images().cloned().collect();
    assert!(eval::fid_between(&model, &images, &images).unwrap() < 1e-6);
    assert!(eval::compute_fid(&model, &images[..1], "conv1", 10, 0).is_err());
}
