//! The frozen classification network and its feature taps.
//!
//! Each conv stage is `convs_per_stage x (3x3 conv -> batch norm -> ReLU)`
//! followed by 2x2 max pooling; the stage's tap is taken after pooling. The
//! head is `fc6 -> ReLU -> fc7 -> ReLU -> fc8`, tapping the ReLU output of
//! `fc7` and the `fc8` logits. `fc6` has no tap.

#[cfg(not(feature = "std"))]
use num_traits::Float as _;

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use sha2::{Digest, Sha256};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image::Image;
use crate::nn;
use crate::optim::Adam;
use crate::params::{Binder, Mode, Params};
use crate::pyramid::{FeaturePyramid, LevelKind};
use crate::real::Real;
use crate::rng;
use crate::tensor::Tensor;

pub const CLASSIFIER_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassifierSpec {
    pub stage_channels: Vec<usize>,
    pub convs_per_stage: usize,
    pub fc_dim: usize,
    pub num_classes: usize,
    pub input_size: usize,
    pub tap_names: Vec<String>,
}

impl ClassifierSpec {
    /// Tap names `conv1..convS, fc7, fc8`.
    pub fn new(
        stage_channels: Vec<usize>,
        convs_per_stage: usize,
        fc_dim: usize,
        num_classes: usize,
        input_size: usize,
    ) -> Self {
        let mut tap_names: Vec<String> = (1..=stage_channels.len())
            .map(|i| format!("conv{i}"))
            .collect();
        tap_names.push("fc7".to_string());
        tap_names.push("fc8".to_string());
        ClassifierSpec {
            stage_channels,
            convs_per_stage,
            fc_dim,
            num_classes,
            input_size,
            tap_names,
        }
    }

    /// Four stages of (32, 64, 128, 256) channels on 64x64 inputs.
    pub fn desk(num_classes: usize) -> Self {
        Self::new(alloc::vec![32, 64, 128, 256], 2, 256, num_classes, 64)
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.stage_channels.len();
        if s == 0 || self.stage_channels.contains(&0) {
            return Err(Error::Config(
                "stage_channels must be non-empty and positive".into(),
            ));
        }
        if self.convs_per_stage == 0 || self.fc_dim == 0 || self.num_classes == 0 {
            return Err(Error::Config(
                "convs_per_stage, fc_dim and num_classes must be positive".into(),
            ));
        }
        if s >= usize::BITS as usize || self.input_size == 0 || self.input_size % (1 << s) != 0 {
            return Err(Error::Config(format!(
                "input_size {} is not divisible by 2^{}",
                self.input_size, s
            )));
        }
        if self.tap_names.len() != s + 2 {
            return Err(Error::Config(format!(
                "expected {} tap names ({} stages + fc7 + fc8), got {}",
                s + 2,
                s,
                self.tap_names.len()
            )));
        }
        for (i, a) in self.tap_names.iter().enumerate() {
            if self.tap_names[..i].contains(a) {
                return Err(Error::Config(format!("duplicate tap name `{a}`")));
            }
        }
        Ok(())
    }

    pub fn num_stages(&self) -> usize {
        self.stage_channels.len()
    }

    pub fn num_levels(&self) -> usize {
        self.tap_names.len()
    }

    pub fn level_index(&self, name: &str) -> Result<usize> {
        self.tap_names
            .iter()
            .position(|t| t == name)
            .ok_or_else(|| Error::UnknownLevel(name.to_string()))
    }

    pub fn level_name(&self, index: usize) -> &str {
        &self.tap_names[index]
    }

    pub fn is_spatial(&self, index: usize) -> bool {
        index < self.num_stages()
    }

    pub fn level_kind(&self, index: usize) -> LevelKind {
        if self.is_spatial(index) {
            LevelKind::Spatial
        } else {
            LevelKind::Vector
        }
    }

    /// Side of spatial level `index` (0-based): `input_size / 2^(index + 1)`.
    pub fn spatial_side(&self, index: usize) -> usize {
        self.input_size >> (index + 1)
    }

    /// Channels of a spatial level, or length of a vector level.
    pub fn level_width(&self, index: usize) -> usize {
        let s = self.num_stages();
        if index < s {
            self.stage_channels[index]
        } else if index == s {
            self.fc_dim
        } else {
            self.num_classes
        }
    }

    /// Per-sample shape of a level's activations.
    pub fn level_shape(&self, index: usize) -> Vec<usize> {
        if self.is_spatial(index) {
            let side = self.spatial_side(index);
            alloc::vec![self.level_width(index), side, side]
        } else {
            alloc::vec![self.level_width(index)]
        }
    }

    /// Index of the last spatial tap.
    pub fn deepest_conv_level(&self) -> usize {
        self.num_stages() - 1
    }

    pub fn canonical(&self) -> String {
        format!(
            "stages={:?};convs={};fc={};classes={};size={};taps={}",
            self.stage_channels,
            self.convs_per_stage,
            self.fc_dim,
            self.num_classes,
            self.input_size,
            self.tap_names.join(",")
        )
    }

    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.canonical().as_bytes()).into()
    }
}

/// Trained (or freshly initialized) classifier arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams {
    pub spec: ClassifierSpec,
    pub arrays: Params<f32>,
    pub version: u32,
}

impl ClassifierParams {
    pub fn init(spec: &ClassifierSpec, seed: u64) -> Result<Self> {
        Ok(ClassifierParams {
            spec: spec.clone(),
            arrays: init_arrays(spec, seed)?,
            version: CLASSIFIER_VERSION,
        })
    }

    /// Digest of every array; unchanged by any GAN training step.
    pub fn digest(&self) -> [u8; 32] {
        self.arrays.digest()
    }

    pub fn spec_hash(&self) -> [u8; 32] {
        self.spec.hash()
    }
}

pub fn init_arrays<T: Real>(spec: &ClassifierSpec, seed: u64) -> Result<Params<T>> {
    spec.validate()?;
    let mut r = rng::substream(seed, 0xC1A5);
    let mut p = Params::new();
    let mut in_ch = 3;
    for (s, &ch) in spec.stage_channels.iter().enumerate() {
        for j in 0..spec.convs_per_stage {
            let base = format!("classifier/stage{}", s + 1);
            nn::add_conv(
                &mut p,
                &mut r,
                &format!("{base}/conv{}", j + 1),
                in_ch,
                ch,
                3,
                false,
            );
            nn::add_batch_norm(&mut p, &format!("{base}/bn{}", j + 1), ch);
            in_ch = ch;
        }
    }
    let side = spec.spatial_side(spec.num_stages() - 1);
    let flat = in_ch * side * side;
    nn::add_linear(&mut p, &mut r, "classifier/fc6", flat, spec.fc_dim, true);
    nn::add_linear(
        &mut p,
        &mut r,
        "classifier/fc7",
        spec.fc_dim,
        spec.fc_dim,
        true,
    );
    nn::add_linear(
        &mut p,
        &mut r,
        "classifier/fc8",
        spec.fc_dim,
        spec.num_classes,
        true,
    );
    Ok(p)
}

/// Graph nodes for every tap, fine to deep; the last is the logits.
pub struct Taps {
    pub levels: Vec<Var>,
}

impl Taps {
    pub fn logits(&self) -> Var {
        *self.levels.last().expect("at least fc8")
    }
}

pub fn forward<T: Real>(
    b: &mut Binder<'_, T>,
    g: &mut Graph<T>,
    spec: &ClassifierSpec,
    x: Var,
) -> Result<Taps> {
    let xs = g.shape(x);
    if xs.len() != 4 || xs[1] != 3 || xs[2] != spec.input_size || xs[3] != spec.input_size {
        return Err(Error::Shape(format!(
            "classifier expects [N, 3, {s}, {s}] input, got {:?}",
            xs,
            s = spec.input_size
        )));
    }
    let mut levels = Vec::with_capacity(spec.num_levels());
    let mut h = x;
    for s in 0..spec.num_stages() {
        for j in 0..spec.convs_per_stage {
            let base = format!("classifier/stage{}", s + 1);
            h = nn::conv(b, g, h, &format!("{base}/conv{}", j + 1))?;
            h = nn::batch_norm(b, g, h, &format!("{base}/bn{}", j + 1))?;
            h = g.relu(h);
        }
        h = g.max_pool2(h);
        levels.push(h);
    }
    let f6 = nn::linear(b, g, h, "classifier/fc6")?;
    let f6 = g.relu(f6);
    let f7 = nn::linear(b, g, f6, "classifier/fc7")?;
    let f7 = g.relu(f7);
    levels.push(f7);
    let f8 = nn::linear(b, g, f7, "classifier/fc8")?;
    levels.push(f8);
    Ok(Taps { levels })
}

fn check_image(spec: &ClassifierSpec, image: &Image) -> Result<()> {
    if image.width() != spec.input_size || image.height() != spec.input_size {
        return Err(Error::Shape(format!(
            "image is {}x{}, classifier expects {s}x{s}",
            image.width(),
            image.height(),
            s = spec.input_size
        )));
    }
    Ok(())
}

/// Eval-mode tap activations for a `[N, 3, H, W]` batch, one tensor per
/// level with a leading batch axis.
pub fn extract_batch(params: &ClassifierParams, images: &Tensor<f32>) -> Result<Vec<Tensor<f32>>> {
    if !images.is_finite() {
        return Err(Error::Validation("non-finite pixel values".into()));
    }
    let mut g = Graph::new();
    let mut b = Binder::frozen(&params.arrays, Mode::Eval);
    let x = g.constant(images.clone());
    let taps = forward(&mut b, &mut g, &params.spec, x)?;
    Ok(taps.levels.iter().map(|&v| g.value(v).clone()).collect())
}

pub fn classify(params: &ClassifierParams, image: &Image) -> Result<Vec<f32>> {
    check_image(&params.spec, image)?;
    let taps = extract_batch(params, &image.to_tensor())?;
    Ok(taps.last().expect("logits").data().to_vec())
}

pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn predict(params: &ClassifierParams, image: &Image) -> Result<usize> {
    Ok(argmax(&classify(params, image)?))
}

/// Predicted classes for many images, evaluated in chunks.
pub fn predict_many(params: &ClassifierParams, images: &[Image]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(32) {
        let taps = extract_batch(params, &Image::batch(chunk)?)?;
        let logits = taps.last().expect("logits");
        let k = logits.per_sample();
        out.extend(logits.data().chunks(k).map(argmax));
    }
    Ok(out)
}

pub fn extract_features(params: &ClassifierParams, image: &Image) -> Result<FeaturePyramid> {
    image.validate_finite()?;
    check_image(&params.spec, image)?;
    let taps = extract_batch(params, &image.to_tensor())?;
    FeaturePyramid::from_batch(&params.spec, &taps, 0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierTrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    /// Fraction of the dataset held out for accuracy measurement.
    pub holdout_fraction: f64,
    /// Training stops after the first epoch reaching this held-out accuracy.
    pub target_accuracy: f64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        ClassifierTrainConfig {
            max_epochs: 12,
            batch_size: 32,
            learning_rate: 1e-3,
            holdout_fraction: 0.2,
            target_accuracy: 0.97,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierReport {
    pub epochs: usize,
    pub final_loss: f64,
    pub holdout_accuracy: f64,
    pub holdout_size: usize,
    pub reached_target: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct EpochProgress {
    pub epoch: usize,
    pub mean_loss: f64,
    pub holdout_accuracy: f64,
}

/// Deterministic `(train, holdout)` index split.
pub fn holdout_split(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut r = rng::substream(seed, 0x5EED);
    rng::shuffle(&mut r, &mut idx);
    let mut h = (n as f64 * fraction).round() as usize;
    if h >= n {
        h = n.saturating_sub(1);
    }
    let holdout = idx.split_off(n - h);
    (idx, holdout)
}

pub fn accuracy(params: &ClassifierParams, data: &Dataset, indices: &[usize]) -> Result<f64> {
    if indices.is_empty() {
        return Ok(0.0);
    }
    let images: Vec<Image> = indices.iter().map(|&i| data.get(i).0.clone()).collect();
    let preds = predict_many(params, &images)?;
    let correct = preds
        .iter()
        .zip(indices)
        .filter(|(&p, &i)| p == data.get(i).1 .0)
        .count();
    Ok(correct as f64 / indices.len() as f64)
}

/// Supervised training with Adam and cross-entropy. The held-out split is
/// never trained on; when it is empty, accuracy is measured on the training
/// samples instead.
pub fn train_classifier(
    data: &Dataset,
    spec: &ClassifierSpec,
    config: &ClassifierTrainConfig,
    seed: u64,
    progress: &mut dyn FnMut(EpochProgress),
) -> Result<(ClassifierParams, ClassifierReport)> {
    spec.validate()?;
    if data.is_empty() {
        return Err(Error::Validation("classifier dataset is empty".into()));
    }
    data.validate(spec.num_classes, spec.input_size)?;
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut params = ClassifierParams::init(spec, seed)?;
    let (mut train_idx, holdout) = holdout_split(data.len(), config.holdout_fraction, seed);
    let eval_idx = if holdout.is_empty() {
        train_idx.clone()
    } else {
        holdout.clone()
    };
    let mut opt = Adam::new(config.learning_rate, 0.9, 0.999);
    let mut r = rng::substream(seed, 0xBA7C);
    let mut report = ClassifierReport {
        epochs: 0,
        final_loss: f64::NAN,
        holdout_accuracy: 0.0,
        holdout_size: holdout.len(),
        reached_target: false,
    };
    for epoch in 0..config.max_epochs.max(1) {
        rng::shuffle(&mut r, &mut train_idx);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in train_idx.chunks(config.batch_size) {
            // a single-sample batch has degenerate batch statistics
            if chunk.len() < 2 && train_idx.len() >= 2 {
                continue;
            }
            let images: Vec<Image> = chunk.iter().map(|&i| data.get(i).0.clone()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| data.get(i).1 .0).collect();
            let mut g = Graph::new();
            let x = g.constant(Image::batch(&images)?);
            let (loss_value, grads, updates) = {
                let mut b = Binder::trainable(&params.arrays, Mode::Train);
                let taps = forward(&mut b, &mut g, spec, x)?;
                let loss = g.cross_entropy(taps.logits(), &labels);
                let mut gr = g.backward(loss);
                let grads = b.gradients(&mut gr);
                (g.scalar(loss), grads, b.take_buffer_updates())
            };
            if !loss_value.is_finite() {
                return Err(Error::Divergence("classifier cross-entropy".into()));
            }
            opt.update(&mut params.arrays, &grads)?;
            crate::params::apply_buffer_updates(&mut params.arrays, updates)?;
            loss_sum += loss_value as f64;
            batches += 1;
        }
        let acc = accuracy(&params, data, &eval_idx)?;
        report.epochs = epoch + 1;
        report.final_loss = loss_sum / batches.max(1) as f64;
        report.holdout_accuracy = acc;
        progress(EpochProgress {
            epoch: epoch + 1,
            mean_loss: report.final_loss,
            holdout_accuracy: acc,
        });
        if acc >= config.target_accuracy {
            report.reached_target = true;
            break;
        }
    }
    Ok((params, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_spec_is_valid_with_expected_taps() {
        let spec = ClassifierSpec::desk(10);
        spec.validate().unwrap();
        assert_eq!(
            spec.tap_names,
            ["conv1", "conv2", "conv3", "conv4", "fc7", "fc8"]
        );
        let sides: Vec<usize> = (0..4).map(|i| spec.spatial_side(i)).collect();
        assert_eq!(sides, [32, 16, 8, 4]);
    }

    #[test]
    fn spec_rejects_indivisible_size() {
        let spec = ClassifierSpec::new(alloc::vec![4, 4, 4], 1, 8, 2, 20);
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_level_is_lookup_error() {
        let spec = ClassifierSpec::desk(10);
        assert_eq!(
            spec.level_index("fc6"),
            Err(Error::UnknownLevel("fc6".into()))
        );
    }

    #[test]
    fn classify_rejects_wrong_size() {
        let spec = ClassifierSpec::new(alloc::vec![4], 1, 8, 3, 8);
        let p = ClassifierParams::init(&spec, 0).unwrap();
        let im = Image::filled(16, 16, [0.0; 3]);
        assert!(matches!(classify(&p, &im), Err(Error::Shape(_))));
        let ok = classify(&p, &Image::filled(8, 8, [0.1; 3])).unwrap();
        assert_eq!(ok.len(), 3);
    }

    #[test]
    fn holdout_split_is_disjoint_and_deterministic() {
        let (a, b) = holdout_split(50, 0.2, 9);
        assert_eq!(b.len(), 10);
        assert!(a.iter().all(|i| !b.contains(i)));
        assert_eq!(holdout_split(50, 0.2, 9), (a, b));
    }
}
