//! Checkpoints for the classifier and for GAN training state, built on the
//! shared [`Archive`] format. Arrays live under the `classifier/`,
//! `generator/` and `discriminator/` namespaces; Adam moments under
//! `opt_g/{m,v}/` and `opt_d/{m,v}/`.

use std::collections::BTreeMap;
use std::path::Path;

use pyragen_core::apps::Model;
use pyragen_core::backbone::{ClassifierParams, ClassifierSpec, CLASSIFIER_VERSION};
use pyragen_core::discriminator::{DiscriminatorConfig, DiscriminatorParams};
use pyragen_core::generator::{GeneratorConfig, GeneratorParams};
use pyragen_core::optim::Adam;
use pyragen_core::params::{hex_digest, ArrayKind, Params};
use pyragen_core::rng::RngState;
use pyragen_core::trainer::TrainState;
use pyragen_core::Tensor;
use serde_json::{json, Value};

use crate::archive::Archive;
use crate::error::{Error, Result};

pub fn spec_to_json(spec: &ClassifierSpec) -> Value {
    json!({
        "stage_channels": spec.stage_channels,
        "convs_per_stage": spec.convs_per_stage,
        "fc_dim": spec.fc_dim,
        "num_classes": spec.num_classes,
        "input_size": spec.input_size,
        "tap_names": spec.tap_names,
    })
}

pub fn spec_from_json(v: &Value) -> Result<ClassifierSpec> {
    let bad = |what: &str| Error::Corrupt(format!("classifier spec: bad `{what}`"));
    let usize_of = |key: &str| -> Result<usize> {
        v.get(key)
            .and_then(Value::as_u64)
            .map(|x| x as usize)
            .ok_or_else(|| bad(key))
    };
    let stage_channels = v
        .get("stage_channels")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("stage_channels"))?
        .iter()
        .map(|x| {
            x.as_u64()
                .map(|x| x as usize)
                .ok_or_else(|| bad("stage_channels"))
        })
        .collect::<Result<Vec<_>>>()?;
    let tap_names = v
        .get("tap_names")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("tap_names"))?
        .iter()
        .map(|x| x.as_str().map(String::from).ok_or_else(|| bad("tap_names")))
        .collect::<Result<Vec<_>>>()?;
    let spec = ClassifierSpec {
        stage_channels,
        convs_per_stage: usize_of("convs_per_stage")?,
        fc_dim: usize_of("fc_dim")?,
        num_classes: usize_of("num_classes")?,
        input_size: usize_of("input_size")?,
        tap_names,
    };
    spec.validate()?;
    Ok(spec)
}

fn put_spec(a: &mut Archive, spec: &ClassifierSpec) {
    a.metadata.insert("spec".into(), spec_to_json(spec));
    a.metadata
        .insert("spec_hash".into(), hex_digest(&spec.hash()).into());
}

fn get_spec(a: &Archive) -> Result<ClassifierSpec> {
    let spec = spec_from_json(a.meta("spec")?)?;
    if a.meta_str("spec_hash")? != hex_digest(&spec.hash()) {
        return Err(Error::Corrupt(
            "spec hash does not match the stored spec".into(),
        ));
    }
    Ok(spec)
}

fn copy_into(dst: &mut Params<f32>, src: &Params<f32>) {
    for (name, e) in src.iter() {
        dst.insert(name, e.kind, e.tensor.clone());
    }
}

fn check_kind(a: &Archive, expected: &str) -> Result<()> {
    let kind = a.meta_str("kind")?;
    if kind != expected {
        return Err(Error::Corrupt(format!(
            "archive holds a `{kind}` checkpoint, expected `{expected}`"
        )));
    }
    Ok(())
}

pub fn classifier_archive(params: &ClassifierParams) -> Archive {
    let mut a = Archive::new();
    a.metadata.insert("kind".into(), "classifier".into());
    a.metadata
        .insert("classifier_version".into(), params.version.into());
    put_spec(&mut a, &params.spec);
    copy_into(&mut a.arrays, &params.arrays);
    a
}

/// Classifier arrays from `a`, validated against the layout its spec implies.
pub fn classifier_from_archive(a: &Archive) -> Result<ClassifierParams> {
    let spec = get_spec(a)?;
    let arrays = a.namespace("classifier/");
    let reference = pyragen_core::backbone::init_arrays::<f32>(&spec, 0)?;
    arrays.check_layout(&reference)?;
    Ok(ClassifierParams {
        spec,
        arrays,
        version: CLASSIFIER_VERSION,
    })
}

pub fn save_classifier(path: &Path, params: &ClassifierParams) -> Result<()> {
    classifier_archive(params).save(path)
}

pub fn load_classifier(path: &Path) -> Result<ClassifierParams> {
    let a = Archive::load(path)?;
    check_kind(&a, "classifier")?;
    classifier_from_archive(&a)
}

fn adam_to(a: &mut Archive, key: &str, opt: &Adam<f32>) {
    a.metadata.insert(
        key.into(),
        json!({
            "lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps, "step": opt.step,
        }),
    );
    for (name, t) in &opt.first {
        a.arrays
            .insert(format!("{key}/m/{name}"), ArrayKind::Buffer, t.clone());
    }
    for (name, t) in &opt.second {
        a.arrays
            .insert(format!("{key}/v/{name}"), ArrayKind::Buffer, t.clone());
    }
}

fn adam_from(a: &Archive, key: &str) -> Result<Adam<f32>> {
    let m = a.meta(key)?;
    let f = |k: &str| -> Result<f32> {
        m.get(k)
            .and_then(Value::as_f64)
            .map(|x| x as f32)
            .ok_or_else(|| Error::Corrupt(format!("optimizer `{key}` lacks `{k}`")))
    };
    let mut opt = Adam::new(f("lr")?, f("beta1")?, f("beta2")?);
    opt.eps = f("eps")?;
    opt.step = m
        .get("step")
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::Corrupt(format!("optimizer `{key}` lacks `step`")))?;
    let mut first = BTreeMap::new();
    let mut second = BTreeMap::new();
    let (pm, pv) = (format!("{key}/m/"), format!("{key}/v/"));
    for (name, e) in a.arrays.iter() {
        if let Some(rest) = name.strip_prefix(&pm) {
            first.insert(rest.to_string(), e.tensor.clone());
        } else if let Some(rest) = name.strip_prefix(&pv) {
            second.insert(rest.to_string(), e.tensor.clone());
        }
    }
    opt.first = first;
    opt.second = second;
    Ok(opt)
}

fn rng_to_json(s: &RngState) -> Value {
    json!({
        "seed": hex_digest(&s.seed),
        "stream": s.stream,
        "word_pos": s.word_pos.to_string(),
    })
}

fn rng_from_json(v: &Value) -> Result<RngState> {
    let bad = || Error::Corrupt("bad rng state".into());
    let hex = v.get("seed").and_then(Value::as_str).ok_or_else(bad)?;
    if hex.len() != 64 {
        return Err(bad());
    }
    let mut seed = [0u8; 32];
    for (i, b) in seed.iter_mut().enumerate() {
        *b = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    Ok(RngState {
        seed,
        stream: v.get("stream").and_then(Value::as_u64).ok_or_else(bad)?,
        word_pos: v
            .get("word_pos")
            .and_then(Value::as_str)
            .and_then(|s| s.parse().ok())
            .ok_or_else(bad)?,
    })
}

/// Everything needed to resume training, plus the frozen classifier so the
/// file is self-contained for inference.
pub fn training_archive(state: &TrainState, classifier: &ClassifierParams, seed: u64) -> Archive {
    let mut a = Archive::new();
    a.metadata.insert("kind".into(), "gan".into());
    put_spec(&mut a, &classifier.spec);
    a.metadata.insert("seed".into(), seed.into());
    a.metadata.insert("step".into(), state.step.into());
    a.metadata.insert("rng".into(), rng_to_json(&state.rng));
    a.metadata.insert(
        "generator".into(),
        json!({
            "latent_dim": state.generator.config.latent_dim,
            "embed_dim": state.generator.config.embed_dim,
            "attention": state.generator.config.attention,
        }),
    );
    a.metadata.insert(
        "discriminator".into(),
        json!({ "attention": state.discriminator.config.attention }),
    );
    a.metadata.insert(
        "classifier_digest".into(),
        hex_digest(&classifier.digest()).into(),
    );
    copy_into(&mut a.arrays, &classifier.arrays);
    copy_into(&mut a.arrays, &state.generator.arrays);
    copy_into(&mut a.arrays, &state.discriminator.arrays);
    adam_to(&mut a, "opt_g", &state.opt_g);
    adam_to(&mut a, "opt_d", &state.opt_d);
    a
}

fn generator_config(a: &Archive) -> Result<GeneratorConfig> {
    let g = a.meta("generator")?;
    let bad = || Error::Corrupt("bad generator config".into());
    Ok(GeneratorConfig {
        latent_dim: g
            .get("latent_dim")
            .and_then(Value::as_u64)
            .ok_or_else(bad)? as usize,
        embed_dim: g.get("embed_dim").and_then(Value::as_u64).ok_or_else(bad)? as usize,
        attention: g
            .get("attention")
            .and_then(Value::as_bool)
            .ok_or_else(bad)?,
    })
}

fn generator_from(a: &Archive, spec: &ClassifierSpec) -> Result<GeneratorParams> {
    let config = generator_config(a)?;
    let arrays = a.namespace("generator/");
    arrays.check_layout(&pyragen_core::generator::init_arrays::<f32>(
        spec, &config, 0,
    )?)?;
    Ok(GeneratorParams {
        spec: spec.clone(),
        config,
        arrays,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainCheckpoint {
    pub state: TrainState,
    pub classifier: ClassifierParams,
    pub seed: u64,
}

/// Decode a GAN checkpoint. With `expected` set, the stored arrays are checked
/// against the layout that spec implies, naming the first mismatch.
pub fn training_from_archive(
    a: &Archive,
    expected: Option<&ClassifierSpec>,
) -> Result<TrainCheckpoint> {
    check_kind(a, "gan")?;
    let stored = get_spec(a)?;
    let spec = expected.cloned().unwrap_or(stored);
    let classifier_arrays = a.namespace("classifier/");
    classifier_arrays.check_layout(&pyragen_core::backbone::init_arrays::<f32>(&spec, 0)?)?;
    let classifier = ClassifierParams {
        spec: spec.clone(),
        arrays: classifier_arrays,
        version: CLASSIFIER_VERSION,
    };
    let generator = generator_from(a, &spec)?;
    let dconfig = DiscriminatorConfig {
        attention: a
            .meta("discriminator")?
            .get("attention")
            .and_then(Value::as_bool)
            .ok_or_else(|| Error::Corrupt("bad discriminator config".into()))?,
    };
    let darrays = a.namespace("discriminator/");
    darrays.check_layout(&pyragen_core::discriminator::init_arrays::<f32>(
        &spec, &dconfig, 0,
    )?)?;
    let state = TrainState {
        generator,
        discriminator: DiscriminatorParams {
            spec: spec.clone(),
            config: dconfig,
            arrays: darrays,
        },
        opt_g: adam_from(a, "opt_g")?,
        opt_d: adam_from(a, "opt_d")?,
        step: a.meta_u64("step")?,
        rng: rng_from_json(a.meta("rng")?)?,
    };
    Ok(TrainCheckpoint {
        state,
        classifier,
        seed: a.meta_u64("seed")?,
    })
}

pub fn save_training(
    path: &Path,
    state: &TrainState,
    classifier: &ClassifierParams,
    seed: u64,
) -> Result<()> {
    training_archive(state, classifier, seed).save(path)
}

pub fn load_training(path: &Path, expected: Option<&ClassifierSpec>) -> Result<TrainCheckpoint> {
    training_from_archive(&Archive::load(path)?, expected)
}

/// Inference model from a GAN checkpoint, optionally replacing the embedded
/// classifier with a separately stored one of the same spec.
pub fn load_model(checkpoint: &Path, classifier: Option<&Path>) -> Result<Model> {
    let a = Archive::load(checkpoint)?;
    check_kind(&a, "gan")?;
    let spec = get_spec(&a)?;
    let generator = generator_from(&a, &spec)?;
    let classifier = match classifier {
        Some(p) => load_classifier(p)?,
        None => classifier_from_archive(&a)?,
    };
    Ok(Model::new(classifier, generator)?)
}

/// Bitwise equality of two tensors, including signed zeros and NaN payloads.
pub fn bitwise_eq(a: &Tensor<f32>, b: &Tensor<f32>) -> bool {
    a.shape() == b.shape()
        && a.data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits())
}
