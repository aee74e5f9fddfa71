#![allow(dead_code)]

use pyragen_core::backbone::ClassifierSpec;
use pyragen_core::pyramid::{FeatureLevel, FeaturePyramid, MaskLevel, MaskPyramid};
use pyragen_core::rng::{self, Rng};
use pyragen_core::Tensor;

/// Two conv stages on 16x16 inputs: taps conv1 (4x8x8), conv2 (8x4x4), fc7 (16), fc8 (3).
pub fn tiny_spec() -> ClassifierSpec {
    ClassifierSpec::new(vec![4, 8], 1, 16, 3, 16)
}

pub fn random_pyramid(spec: &ClassifierSpec, r: &mut Rng) -> FeaturePyramid {
    FeaturePyramid {
        levels: (0..spec.num_levels())
            .map(|i| FeatureLevel {
                id: spec.level_name(i).into(),
                kind: spec.level_kind(i),
                data: rng::normal_tensor(r, &spec.level_shape(i), 1.0),
            })
            .collect(),
    }
}

/// Independent Bernoulli(1/2) gates.
pub fn random_masks(spec: &ClassifierSpec, r: &mut Rng) -> MaskPyramid {
    let mut m = MaskPyramid::zeros(spec);
    for level in &mut m.levels {
        for v in level.data.data_mut() {
            *v = if rng::uniform(r) < 0.5 { 1.0 } else { 0.0 };
        }
    }
    m
}

pub fn mask_level(id: &str, data: Tensor<f32>) -> MaskLevel {
    MaskLevel {
        id: id.into(),
        data,
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

/// Toy images of the first `tiny_spec().num_classes` classes at 16x16.
pub fn tiny_dataset(per_class: usize, seed: u64) -> pyragen_core::data::Dataset {
    let spec = tiny_spec();
    let mut r = rng::seeded(seed);
    let mut samples = Vec::new();
    for _ in 0..per_class {
        for c in 0..spec.num_classes {
            samples.push((
                pyragen_core::toy::render(c, spec.input_size, &mut r),
                pyragen_core::data::ClassLabel(c),
            ));
        }
    }
    pyragen_core::data::Dataset::from_samples(samples)
}

pub fn tiny_train_config() -> pyragen_core::trainer::TrainConfig {
    pyragen_core::trainer::TrainConfig {
        batch_size: 4,
        latent_dim: 8,
        embed_dim: 4,
        steps: 3,
        seed: 5,
        snapshot_every: 2,
        ..Default::default()
    }
}

/// Untrained classifier and generator on [`tiny_spec`].
pub fn tiny_model(seed: u64) -> pyragen_core::apps::Model {
    let spec = tiny_spec();
    let classifier = pyragen_core::backbone::ClassifierParams::init(&spec, seed).unwrap();
    let generator = pyragen_core::generator::GeneratorParams::init(
        &spec,
        &tiny_train_config().generator_config(),
        seed,
    )
    .unwrap();
    pyragen_core::apps::Model::new(classifier, generator).unwrap()
}
