mod common;

use common::{tiny_dataset, tiny_spec};
use pyragen_core::backbone::{self, ClassifierParams, ClassifierSpec, ClassifierTrainConfig};
use pyragen_core::data::{ClassLabel, Dataset};
use pyragen_core::image::Image;
use pyragen_core::pyramid::LevelKind;
use pyragen_core::Error;

#[test]
fn desk_spec_levels() {
    let spec = ClassifierSpec::desk(10);
    let names: Vec<&str> = (0..spec.num_levels()).map(|i| spec.level_name(i)).collect();
    assert_eq!(names, ["conv1", "conv2", "conv3", "conv4", "fc7", "fc8"]);
    let shapes: Vec<Vec<usize>> = (0..6).map(|i| spec.level_shape(i)).collect();
    assert_eq!(
        shapes,
        [
            vec![32, 32, 32],
            vec![64, 16, 16],
            vec![128, 8, 8],
            vec![256, 4, 4],
            vec![256],
            vec![10]
        ]
    );
    assert_eq!(spec.deepest_conv_level(), 3);
    assert!(matches!(
        spec.level_index("pool5"),
        Err(Error::UnknownLevel(_))
    ));
    assert_ne!(spec.hash(), ClassifierSpec::desk(9).hash());
}

#[test]
fn features_follow_the_spec() {
    let spec = tiny_spec();
    let params = ClassifierParams::init(&spec, 3).unwrap();
    let im = tiny_dataset(1, 1).get(0).0.clone();
    let f = backbone::extract_features(&params, &im).unwrap();
    f.validate(&spec).unwrap();
    for (i, level) in f.levels.iter().enumerate() {
        assert_eq!(level.id, spec.level_name(i));
        assert_eq!(level.data.shape(), spec.level_shape(i).as_slice());
        assert_eq!(level.kind == LevelKind::Spatial, spec.is_spatial(i));
    }
    let logits = backbone::classify(&params, &im).unwrap();
    assert_eq!(logits, f.levels[3].data.data());
    assert_eq!(
        backbone::predict(&params, &im).unwrap(),
        backbone::argmax(&logits)
    );
}

#[test]
fn holdout_split_is_a_deterministic_partition() {
    let (train, hold) = backbone::holdout_split(50, 0.2, 4);
    assert_eq!((train.len(), hold.len()), (40, 10));
    let mut all: Vec<usize> = train.iter().chain(&hold).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..50).collect::<Vec<_>>());
    assert_eq!(backbone::holdout_split(50, 0.2, 4), (train, hold));
    assert_eq!(backbone::holdout_split(1, 0.5, 0).1.len(), 0);
}

#[test]
fn training_is_deterministic_and_reduces_the_loss() {
    let spec = tiny_spec();
    let data = tiny_dataset(8, 2);
    let config = ClassifierTrainConfig {
        max_epochs: 4,
        batch_size: 8,
        learning_rate: 3e-3,
        holdout_fraction: 0.25,
        target_accuracy: 1.1,
    };
    let mut losses = Vec::new();
    let (a, report) =
        backbone::train_classifier(&data, &spec, &config, 7, &mut |p| losses.push(p.mean_loss))
            .unwrap();
    let (b, _) = backbone::train_classifier(&data, &spec, &config, 7, &mut |_| {}).unwrap();
    assert_eq!(a.digest(), b.digest());
    assert_eq!(report.epochs, 4);
    assert_eq!(report.holdout_size, 6);
    assert!(!report.reached_target);
    assert!(losses[3] < losses[0], "{losses:?}");
}

#[test]
fn training_stops_at_the_target() {
    let config = ClassifierTrainConfig {
        max_epochs: 5,
        target_accuracy: 0.0,
        ..Default::default()
    };
    let (_, report) =
        backbone::train_classifier(&tiny_dataset(2, 3), &tiny_spec(), &config, 0, &mut |_| {})
            .unwrap();
    assert_eq!(report.epochs, 1);
    assert!(report.reached_target);
}

#[test]
fn bad_datasets_are_rejected() {
    let spec = tiny_spec();
    let config = ClassifierTrainConfig::default();
    let mut data = tiny_dataset(1, 4);
    data.push(Image::filled(8, 8, [0.0; 3]), ClassLabel(0));
    let err = backbone::train_classifier(&data, &spec, &config, 0, &mut |_| {}).unwrap_err();
    assert!(matches!(err, Error::Preprocess(_)), "{err}");
    assert!(err.to_string().contains('3'), "{err}");
    let labels = Dataset::from_samples(vec![(Image::filled(16, 16, [0.0; 3]), ClassLabel(5))]);
    assert!(matches!(
        backbone::train_classifier(&labels, &spec, &config, 0, &mut |_| {}),
        Err(Error::Validation(_))
    ));
    assert!(backbone::train_classifier(&Dataset::new(), &spec, &config, 0, &mut |_| {}).is_err());
}
