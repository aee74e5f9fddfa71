#![allow(dead_code)]

use std::path::{Path, PathBuf};

use pyragen::{checkpoint, dataset, imageio};
use pyragen_core::backbone::{ClassifierParams, ClassifierSpec};
use pyragen_core::data::{ClassLabel, Dataset};
use pyragen_core::image::{Image, Rect, RegionMask};
use pyragen_core::trainer::{self, TrainConfig, TrainState};
use pyragen_core::{rng, toy};
use tempfile::TempDir;

/// Two conv stages on 16x16 inputs, three classes.
pub fn tiny_spec() -> ClassifierSpec {
    ClassifierSpec::new(vec![4, 8], 1, 16, 3, 16)
}

pub fn tiny_config() -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        latent_dim: 8,
        embed_dim: 4,
        steps: 2,
        seed: 3,
        snapshot_every: 1,
        ..Default::default()
    }
}

pub fn tiny_dataset(per_class: usize, seed: u64) -> Dataset {
    let spec = tiny_spec();
    let mut r = rng::seeded(seed);
    let mut samples = Vec::new();
    for _ in 0..per_class {
        for c in 0..spec.num_classes {
            samples.push((toy::render(c, spec.input_size, &mut r), ClassLabel(c)));
        }
    }
    Dataset::from_samples(samples)
}

/// A directory holding a classifier, a one-step GAN checkpoint, a small
/// manifest dataset and a few input PNGs.
pub struct Fixture {
    pub dir: TempDir,
    pub classifier: ClassifierParams,
    pub state: TrainState,
}

impl Fixture {
    pub fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny_spec();
        let config = tiny_config();
        let classifier = ClassifierParams::init(&spec, 1).unwrap();
        let data = tiny_dataset(3, 2);
        let mut state = TrainState::init(&spec, &config).unwrap();
        trainer::advance(&mut state, &classifier, &config, &data).unwrap();
        checkpoint::save_classifier(&dir.path().join("classifier.pgc"), &classifier).unwrap();
        checkpoint::save_training(
            &dir.path().join("gan.pgc"),
            &state,
            &classifier,
            config.seed,
        )
        .unwrap();
        dataset::save(&data, &dir.path().join("data")).unwrap();
        let image = data.get(0).0.clone();
        imageio::write_image(&dir.path().join("image.png"), &image).unwrap();
        imageio::write_image(
            &dir.path().join("patch.png"),
            &data.get(1).0.crop(Rect::new(0, 0, 8, 8)).unwrap(),
        )
        .unwrap();
        let region = RegionMask::from_rect(16, 16, Rect::new(0, 0, 8, 8)).unwrap();
        std::fs::write(
            dir.path().join("region.png"),
            imageio::encode_region(&region).unwrap(),
        )
        .unwrap();
        std::fs::write(
            dir.path().join("empty.png"),
            imageio::encode_region(&RegionMask::empty(16, 16)).unwrap(),
        )
        .unwrap();
        Fixture {
            dir,
            classifier,
            state,
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    pub fn image(&self) -> Image {
        imageio::read_image(&self.path("image.png")).unwrap()
    }
}

pub fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}
