//! Adversarial training: paired batch assembly, alternating discriminator and
//! generator updates, and the per-step metrics record.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::backbone::{self, ClassifierParams, ClassifierSpec};
use crate::data::{ClassLabel, Dataset};
use crate::discriminator::{self, DiscriminatorConfig, DiscriminatorParams};
use crate::error::{Error, Result};
use crate::generator::{self, GeneratorConfig, GeneratorInputs, GeneratorParams};
use crate::graph::{Graph, Var};
use crate::image::Image;
use crate::losses::{self, LossWeights};
use crate::optim::Adam;
use crate::params::{Binder, Mode};
use crate::pyramid::{self, MaskDraw, MaskPyramid};
use crate::rng::{self, Rng, RngState};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub p_crop: f64,
    pub lr_g: f64,
    pub lr_d: f64,
    pub batch_size: usize,
    pub latent_dim: usize,
    pub steps: u64,
    pub seed: u64,
    pub adam_betas: (f64, f64),
    pub snapshot_every: u64,
    pub embed_dim: usize,
    pub attention: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            weights: LossWeights::default(),
            p_crop: 0.3,
            lr_g: 1e-4,
            lr_d: 1e-4,
            batch_size: 32,
            latent_dim: 128,
            steps: 20_000,
            seed: 0,
            adam_betas: (0.0, 0.9),
            snapshot_every: 1_000,
            embed_dim: 128,
            attention: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if !(0.0..=1.0).contains(&self.p_crop) {
            return Err(Error::Config(format!(
                "p_crop {} outside [0, 1]",
                self.p_crop
            )));
        }
        if !(self.lr_g > 0.0 && self.lr_d > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.batch_size == 0 || self.batch_size % 2 != 0 {
            return Err(Error::Config(format!(
                "batch_size must be a positive even number, got {}",
                self.batch_size
            )));
        }
        if self.latent_dim == 0 || self.embed_dim == 0 {
            return Err(Error::Config(
                "latent_dim and embed_dim must be positive".into(),
            ));
        }
        if self.snapshot_every == 0 {
            return Err(Error::Config("snapshot_every must be positive".into()));
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::Config(format!(
                "adam betas ({b1}, {b2}) outside [0, 1)"
            )));
        }
        Ok(())
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            latent_dim: self.latent_dim,
            embed_dim: self.embed_dim,
            attention: self.attention,
        }
    }

    pub fn discriminator_config(&self) -> DiscriminatorConfig {
        DiscriminatorConfig {
            attention: self.attention,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub generator: GeneratorParams,
    pub discriminator: DiscriminatorParams,
    pub opt_g: Adam<f32>,
    pub opt_d: Adam<f32>,
    pub step: u64,
    pub rng: RngState,
}

impl TrainState {
    pub fn init(spec: &ClassifierSpec, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let (b1, b2) = config.adam_betas;
        Ok(TrainState {
            generator: GeneratorParams::init(spec, &config.generator_config(), config.seed)?,
            discriminator: DiscriminatorParams::init(
                spec,
                &config.discriminator_config(),
                config.seed,
            )?,
            opt_g: Adam::new(config.lr_g as f32, b1 as f32, b2 as f32),
            opt_d: Adam::new(config.lr_d as f32, b1 as f32, b2 as f32),
            step: 0,
            rng: rng::save_state(&rng::substream(config.seed, 0x7A1)),
        })
    }
}

/// One base entry of a batch. It feeds the generator twice, once per noise
/// vector, with identical image, masks and label.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingEntry {
    pub image: Image,
    pub label: ClassLabel,
    pub masks: MaskDraw,
    pub z_a: Vec<f32>,
    pub z_b: Vec<f32>,
}

pub fn make_training_batch(
    dataset: &Dataset,
    spec: &ClassifierSpec,
    r: &mut Rng,
    batch_size: usize,
    p_crop: f64,
    latent_dim: usize,
) -> Result<Vec<TrainingEntry>> {
    if dataset.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    if batch_size == 0 || batch_size % 2 != 0 {
        return Err(Error::Config(format!(
            "batch_size must be a positive even number, got {batch_size}"
        )));
    }
    let entries = batch_size / 2;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    rng::shuffle(r, &mut order);
    // Distinct while the dataset allows it, wrapping around otherwise.
    (0..entries)
        .map(|i| {
            let (image, label) = dataset.get(order[i % order.len()]);
            Ok(TrainingEntry {
                image: image.clone(),
                label: *label,
                masks: pyramid::sample_training_masks(spec, p_crop, r)?,
                z_a: rng::normal_vec(r, latent_dim),
                z_b: rng::normal_vec(r, latent_dim),
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub adv_d: f64,
    pub adv_g: f64,
    pub rec: f64,
    pub div: f64,
    pub total: f64,
}

impl StepMetrics {
    pub const HEADER: &'static str = "step\tL_adv_d\tL_adv_g\tL_rec\tL_div\ttotal";

    pub fn tsv_row(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            self.step, self.adv_d, self.adv_g, self.rec, self.div, self.total
        )
    }

    fn check(&self) -> Result<()> {
        for (name, v) in [
            ("L_adv_d", self.adv_d),
            ("L_adv_g", self.adv_g),
            ("L_rec", self.rec),
            ("L_div", self.div),
            ("total", self.total),
        ] {
            if !v.is_finite() {
                return Err(Error::Divergence(format!(
                    "{name} is {v} at step {}",
                    self.step
                )));
            }
        }
        Ok(())
    }
}

/// Generator inputs for a batch: rows `0..B` use `z_a`, rows `B..2B` use `z_b`.
struct Prepared {
    real: Tensor<f32>,
    real_labels: Vec<usize>,
    features: Vec<Tensor<f32>>,
    masks: Vec<Tensor<f32>>,
    z: Tensor<f32>,
    labels: Vec<usize>,
    z_dist: Vec<f32>,
}

fn duplicate(t: &Tensor<f32>) -> Result<Tensor<f32>> {
    Tensor::stack_batch(&[t, t])
}

fn prepare(classifier: &ClassifierParams, batch: &[TrainingEntry]) -> Result<Prepared> {
    if batch.is_empty() {
        return Err(Error::Config("empty training batch".into()));
    }
    let images: Vec<Image> = batch.iter().map(|e| e.image.clone()).collect();
    let real = Image::batch(&images)?;
    let taps = backbone::extract_batch(classifier, &real)?;
    let masks: Vec<&MaskPyramid> = batch.iter().map(|e| &e.masks.masks).collect();
    let masks = MaskPyramid::stack(&masks)?;
    let dim = batch[0].z_a.len();
    let mut z = Vec::with_capacity(2 * batch.len() * dim);
    for e in batch {
        z.extend_from_slice(&e.z_a);
    }
    for e in batch {
        z.extend_from_slice(&e.z_b);
    }
    let real_labels: Vec<usize> = batch.iter().map(|e| e.label.0).collect();
    let mut labels = real_labels.clone();
    labels.extend_from_slice(&real_labels);
    Ok(Prepared {
        real,
        real_labels,
        features: taps.iter().map(duplicate).collect::<Result<_>>()?,
        masks: masks.iter().map(duplicate).collect::<Result<_>>()?,
        z: Tensor::from_vec(&[2 * batch.len(), dim], z)?,
        labels,
        z_dist: batch
            .iter()
            .map(|e| losses::noise_distance(&e.z_a, &e.z_b) as f32)
            .collect(),
    })
}

fn generator_pass(
    b: &mut Binder<'_, f32>,
    g: &mut Graph<f32>,
    params: &GeneratorParams,
    p: &Prepared,
) -> Result<(Var, Vec<Var>)> {
    let features: Vec<Var> = p.features.iter().map(|t| g.constant(t.clone())).collect();
    let masks: Vec<Var> = p.masks.iter().map(|t| g.constant(t.clone())).collect();
    let z = g.constant(p.z.clone());
    let out = generator::forward(
        b,
        g,
        &params.spec,
        &params.config,
        &GeneratorInputs {
            z,
            features: &features,
            masks: &masks,
            labels: &p.labels,
        },
    )?;
    Ok((out, features))
}

fn ensure_finite(params: &crate::params::Params<f32>, what: &str) -> Result<()> {
    match params.first_non_finite() {
        Some(name) => Err(Error::Divergence(format!(
            "{what} array `{name}` is not finite"
        ))),
        None => Ok(()),
    }
}

/// One discriminator update followed by one generator update.
pub fn train_step(
    state: &mut TrainState,
    classifier: &ClassifierParams,
    config: &TrainConfig,
    batch: &[TrainingEntry],
) -> Result<StepMetrics> {
    let p = prepare(classifier, batch)?;
    let spec = &classifier.spec;
    let n_real = p.real_labels.len();

    // Discriminator: real images against detached samples of the current G.
    let fake = {
        let mut g = Graph::new();
        let mut b = Binder::frozen(&state.generator.arrays, Mode::Train);
        let (out, _) = generator_pass(&mut b, &mut g, &state.generator, &p)?;
        g.value(out).clone()
    };
    let adv_d = {
        let mut g = Graph::new();
        let mut b = Binder::trainable(&state.discriminator.arrays, Mode::Train);
        let both = Tensor::stack_batch(&[&p.real, &fake])?;
        let mut labels = p.real_labels.clone();
        labels.extend_from_slice(&p.labels);
        let x = g.constant(both);
        let scores = discriminator::forward(
            &mut b,
            &mut g,
            spec,
            &state.discriminator.config,
            x,
            &labels,
        )?;
        let real_s = g.slice_batch(scores, 0, n_real);
        let fake_s = g.slice_batch(scores, n_real, p.labels.len());
        let loss = losses::lsgan_d_graph(&mut g, real_s, fake_s);
        let value = g.scalar(loss) as f64;
        if !value.is_finite() {
            return Err(Error::Divergence(format!(
                "L_adv_d is {value} at step {}",
                state.step + 1
            )));
        }
        let mut grads = g.backward(loss);
        let grads = b.gradients(&mut grads);
        let updates = b.take_buffer_updates();
        state
            .opt_d
            .update(&mut state.discriminator.arrays, &grads)?;
        crate::params::apply_buffer_updates(&mut state.discriminator.arrays, updates)?;
        value
    };
    ensure_finite(&state.discriminator.arrays, "discriminator")?;

    // Generator: adversarial, reconstruction and diversity terms.
    let (adv_g, rec, div, total) = {
        let mut g = Graph::new();
        let mut b = Binder::trainable(&state.generator.arrays, Mode::Train);
        let (out, features) = generator_pass(&mut b, &mut g, &state.generator, &p)?;
        let mut db = Binder::frozen(&state.discriminator.arrays, Mode::Eval);
        let scores = discriminator::forward(
            &mut db,
            &mut g,
            spec,
            &state.discriminator.config,
            out,
            &p.labels,
        )?;
        let adv = losses::lsgan_g_graph(&mut g, scores);
        let mut cb = Binder::frozen(&classifier.arrays, Mode::Eval);
        let taps = backbone::forward(&mut cb, &mut g, spec, out)?;
        let rec = losses::reconstruction_graph(
            &mut g,
            &features,
            &taps.levels,
            &p.masks,
            config.weights.eps_norm,
        )?;
        let div = losses::diversity_graph(&mut g, out, &p.z_dist, config.weights.eps_div)?;
        let r = g.scale(rec, config.weights.alpha as f32);
        let d = g.scale(div, config.weights.beta as f32);
        let total = g.add(adv, r);
        let total = g.add(total, d);
        let values = (
            g.scalar(adv) as f64,
            g.scalar(rec) as f64,
            g.scalar(div) as f64,
            g.scalar(total) as f64,
        );
        let probe = StepMetrics {
            step: state.step + 1,
            adv_d,
            adv_g: values.0,
            rec: values.1,
            div: values.2,
            total: values.3,
        };
        probe.check()?;
        let mut grads = g.backward(total);
        let grads = b.gradients(&mut grads);
        let updates = b.take_buffer_updates();
        state.opt_g.update(&mut state.generator.arrays, &grads)?;
        crate::params::apply_buffer_updates(&mut state.generator.arrays, updates)?;
        values
    };
    ensure_finite(&state.generator.arrays, "generator")?;

    state.step += 1;
    Ok(StepMetrics {
        step: state.step,
        adv_d,
        adv_g,
        rec,
        div,
        total,
    })
}

/// Draw the next batch from the state's stream and take one step.
pub fn advance(
    state: &mut TrainState,
    classifier: &ClassifierParams,
    config: &TrainConfig,
    dataset: &Dataset,
) -> Result<StepMetrics> {
    let mut r = rng::restore_state(&state.rng);
    let batch = make_training_batch(
        dataset,
        &classifier.spec,
        &mut r,
        config.batch_size,
        config.p_crop,
        config.latent_dim,
    )?;
    let before = state.clone();
    match train_step(state, classifier, config, &batch) {
        Ok(m) => {
            state.rng = rng::save_state(&r);
            Ok(m)
        }
        Err(e) => {
            *state = before;
            Err(e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults() {
        let c = TrainConfig::default();
        assert_eq!(c.latent_dim, 128);
        assert_eq!(c.lr_g, 1e-4);
        assert_eq!(c.lr_d, 1e-4);
        assert_eq!(c.p_crop, 0.3);
        assert_eq!(c.batch_size, 32);
        assert!(c.validate().is_ok());
        let odd = TrainConfig {
            batch_size: 3,
            ..c.clone()
        };
        assert!(matches!(odd.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn metrics_row_has_six_columns() {
        let m = StepMetrics {
            step: 3,
            adv_d: 0.5,
            adv_g: 1.0,
            rec: 0.2,
            div: 0.1,
            total: 1.03,
        };
        assert_eq!(m.tsv_row().split('\t').count(), 6);
        assert_eq!(StepMetrics::HEADER.split('\t').count(), 6);
    }
}
