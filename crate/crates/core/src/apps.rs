//! Inference pipelines on a trained model: level inversion, re-painting,
//! composition and re-labeling. Each one builds a feature pyramid and a mask
//! pyramid and then samples the generator.

use alloc::string::String;
use alloc::vec::Vec;

use crate::backbone::{self, ClassifierParams, ClassifierSpec};
use crate::data::ClassLabel;
use crate::error::{Error, Result};
use crate::generator::{self, GeneratorBatch, GeneratorParams, DEFAULT_TRUNCATION};
use crate::image::{Image, Rect, RegionMask};
use crate::params::hex_digest;
use crate::pyramid::{self, FeaturePyramid, MaskPyramid};
use crate::rng;

/// Samples generated per forward pass.
const CHUNK: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub classifier: ClassifierParams,
    pub generator: GeneratorParams,
    pub truncation: f32,
}

impl Model {
    pub fn new(classifier: ClassifierParams, generator: GeneratorParams) -> Result<Self> {
        if classifier.spec != generator.spec {
            return Err(Error::Shape(
                "generator was built for a different classifier spec".into(),
            ));
        }
        Ok(Model {
            classifier,
            generator,
            truncation: DEFAULT_TRUNCATION,
        })
    }

    pub fn spec(&self) -> &ClassifierSpec {
        &self.classifier.spec
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Provenance {
    pub operation: String,
    pub seed: u64,
    pub level: String,
    pub label: usize,
    /// Hex SHA-256 of the mask pyramid.
    pub mask_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub samples: Vec<Image>,
    pub provenance: Provenance,
}

/// Fail on an all-off or all-on region.
pub fn check_region(region: &RegionMask) -> Result<()> {
    if region.is_empty() {
        return Err(Error::DegenerateRegion("region selects no pixels".into()));
    }
    if region.is_full() {
        return Err(Error::DegenerateRegion("region selects every pixel".into()));
    }
    Ok(())
}

pub fn invert_masks(spec: &ClassifierSpec, level: usize) -> MaskPyramid {
    MaskPyramid::single_level(spec, level)
}

/// Selected level on, finer levels on outside the region, deeper levels off.
pub fn repaint_masks(
    spec: &ClassifierSpec,
    region: &RegionMask,
    level: usize,
) -> Result<MaskPyramid> {
    pyramid::layered_masks(spec, region, level)
}

pub fn relabel_masks(spec: &ClassifierSpec) -> MaskPyramid {
    invert_masks(spec, spec.deepest_conv_level())
}

/// Base features everywhere except `level`, which comes from `pasted`.
pub fn composite_features(
    base: &FeaturePyramid,
    pasted: &FeaturePyramid,
    level: usize,
) -> Result<FeaturePyramid> {
    if base.len() != pasted.len() || level >= base.len() {
        return Err(Error::Shape("composite pyramids are not aligned".into()));
    }
    let mut out = base.clone();
    out.levels[level] = pasted.levels[level].clone();
    Ok(out)
}

/// Generate `num_samples` images from fixed features and masks with
/// independent truncated noise drawn from `seed`.
pub fn sample(
    generator: &GeneratorParams,
    features: &FeaturePyramid,
    masks: &MaskPyramid,
    label: ClassLabel,
    num_samples: usize,
    seed: u64,
    truncation: f32,
) -> Result<Vec<Image>> {
    label.check(generator.spec.num_classes)?;
    if num_samples == 0 {
        return Err(Error::Validation("num_samples must be at least 1".into()));
    }
    let mut r = rng::seeded(seed);
    let zs = (0..num_samples)
        .map(|_| generator::sample_truncated(&mut r, generator.config.latent_dim, truncation))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(num_samples);
    for chunk in zs.chunks(CHUNK) {
        let n = chunk.len();
        let fs: Vec<&FeaturePyramid> = (0..n).map(|_| features).collect();
        let ms: Vec<&MaskPyramid> = (0..n).map(|_| masks).collect();
        let labels = alloc::vec![label.0; n];
        let batch = GeneratorBatch::from_parts(&generator.spec, chunk, &fs, &ms, &labels)?;
        let images = generator::generate_batch(generator, &batch)?;
        for i in 0..n {
            out.push(Image::from_batch(&images, i)?);
        }
    }
    Ok(out)
}

fn resolve_label(model: &Model, image: &Image, label: Option<ClassLabel>) -> Result<ClassLabel> {
    match label {
        Some(l) => l.check(model.spec().num_classes),
        None => Ok(ClassLabel(backbone::predict(&model.classifier, image)?)),
    }
}

fn prepare(model: &Model, image: &Image) -> Result<Image> {
    image.validate()?;
    image.preprocess(model.spec().input_size)
}

#[allow(clippy::too_many_arguments)]
fn run(
    model: &Model,
    operation: &str,
    features: &FeaturePyramid,
    masks: MaskPyramid,
    level: usize,
    label: ClassLabel,
    num_samples: usize,
    seed: u64,
) -> Result<Generated> {
    let samples = sample(
        &model.generator,
        features,
        &masks,
        label,
        num_samples,
        seed,
        model.truncation,
    )?;
    Ok(Generated {
        samples,
        provenance: Provenance {
            operation: operation.into(),
            seed,
            level: model.spec().level_name(level).into(),
            label: label.0,
            mask_hash: hex_digest(&masks.digest()),
        },
    })
}

pub fn invert_at_level(
    model: &Model,
    image: &Image,
    level_id: &str,
    num_samples: usize,
    seed: u64,
    label: Option<ClassLabel>,
) -> Result<Generated> {
    let level = model.spec().level_index(level_id)?;
    let image = prepare(model, image)?;
    let label = resolve_label(model, &image, label)?;
    let features = backbone::extract_features(&model.classifier, &image)?;
    let masks = invert_masks(model.spec(), level);
    run(
        model,
        "invert",
        &features,
        masks,
        level,
        label,
        num_samples,
        seed,
    )
}

/// Regenerate the marked pixels of `region` from `level_id` upwards while the
/// finer levels keep the rest of the image. A degenerate region is accepted
/// here; callers that must reject it use [`check_region`].
pub fn repaint(
    model: &Model,
    image: &Image,
    region: &RegionMask,
    level_id: &str,
    num_samples: usize,
    seed: u64,
    label: Option<ClassLabel>,
) -> Result<Generated> {
    let level = model.spec().level_index(level_id)?;
    let image = prepare(model, image)?;
    let size = model.spec().input_size;
    let region = if region.width() != size || region.height() != size {
        region.resize_nearest(size, size)
    } else {
        region.clone()
    };
    let label = resolve_label(model, &image, label)?;
    let features = backbone::extract_features(&model.classifier, &image)?;
    let masks = repaint_masks(model.spec(), &region, level)?;
    run(
        model,
        "repaint",
        &features,
        masks,
        level,
        label,
        num_samples,
        seed,
    )
}

/// Paste `patch` into `placement` of `base`, take `level_id` from the pasted
/// image and the finer levels from the base with the placement blocked.
#[allow(clippy::too_many_arguments)]
pub fn composite(
    model: &Model,
    base: &Image,
    patch: &Image,
    placement: Rect,
    level_id: &str,
    num_samples: usize,
    seed: u64,
    label: Option<ClassLabel>,
) -> Result<Generated> {
    let level = model.spec().level_index(level_id)?;
    placement.check_within(base.width(), base.height())?;
    patch.validate()?;
    let pasted = base.paste(patch, placement)?;
    let size = model.spec().input_size;
    let base_p = prepare(model, base)?;
    let pasted_p = prepare(model, &pasted)?;
    let region =
        RegionMask::from_rect(base.width(), base.height(), placement)?.resize_nearest(size, size);
    let label = resolve_label(model, &base_p, label)?;
    let fb = backbone::extract_features(&model.classifier, &base_p)?;
    let fp = backbone::extract_features(&model.classifier, &pasted_p)?;
    let features = composite_features(&fb, &fp, level)?;
    let masks = repaint_masks(model.spec(), &region, level)?;
    run(
        model,
        "composite",
        &features,
        masks,
        level,
        label,
        num_samples,
        seed,
    )
}

pub fn relabel(
    model: &Model,
    image: &Image,
    new_label: ClassLabel,
    num_samples: usize,
    seed: u64,
) -> Result<Generated> {
    new_label.check(model.spec().num_classes)?;
    let image = prepare(model, image)?;
    let level = model.spec().deepest_conv_level();
    let features = backbone::extract_features(&model.classifier, &image)?;
    let masks = relabel_masks(model.spec());
    run(
        model,
        "relabel",
        &features,
        masks,
        level,
        new_label,
        num_samples,
        seed,
    )
}
