//! The mirror generator `G(z, F, M, label)`.
//!
//! Layout for a classifier with `S` stages of widths `w_1..w_S`:
//!
//! * initial block: `proj(z) + proj([f_fc7*m_fc7 | m_fc7]) + proj([f_fc8*m_fc8 | m_fc8])`
//!   reshaped to `w_S x s x s`, where `s` is the deepest tap's side;
//! * one block per stage, deepest first. Block `k` is a residual block
//!   (conditional BN, ReLU, nearest x2 upsampling for every block but the
//!   first, two 3x3 convs, 1x1 skip when widths differ) whose output is summed
//!   with a bias-free 3x3 conv of `[f_l * m_l | m_l]` at the tap's resolution;
//! * self-attention after the block at the finest tap resolution;
//! * BN, ReLU, x2 upsampling, 3x3 conv to RGB and `tanh`.

use alloc::format;
use alloc::vec::Vec;

use crate::backbone::ClassifierSpec;
use crate::data::ClassLabel;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image::Image;
use crate::nn;
use crate::params::{Binder, Mode, Params};
use crate::pyramid::{FeaturePyramid, MaskPyramid};
use crate::real::Real;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

pub const GENERATOR_VERSION: u32 = 1;
pub const DEFAULT_TRUNCATION: f32 = 1.0;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GeneratorConfig {
    pub latent_dim: usize,
    pub embed_dim: usize,
    pub attention: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            latent_dim: 128,
            embed_dim: 128,
            attention: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorParams {
    pub spec: ClassifierSpec,
    pub config: GeneratorConfig,
    pub arrays: Params<f32>,
}

/// Spatial level served by generator block `k` (deepest first).
pub fn block_level(spec: &ClassifierSpec, k: usize) -> usize {
    spec.num_stages() - 1 - k
}

fn block_name(k: usize) -> alloc::string::String {
    format!("generator/block{}", k + 1)
}

fn block_channels(spec: &ClassifierSpec, k: usize) -> (usize, usize) {
    let s = spec.num_stages();
    let out = spec.stage_channels[block_level(spec, k)];
    let inp = if k == 0 {
        spec.stage_channels[s - 1]
    } else {
        spec.stage_channels[block_level(spec, k - 1)]
    };
    (inp, out)
}

fn attention_block(spec: &ClassifierSpec) -> usize {
    spec.num_stages() - 1
}

pub fn init_arrays<T: Real>(
    spec: &ClassifierSpec,
    cfg: &GeneratorConfig,
    seed: u64,
) -> Result<Params<T>> {
    spec.validate()?;
    if cfg.latent_dim == 0 || cfg.embed_dim == 0 {
        return Err(Error::Config(
            "latent_dim and embed_dim must be positive".into(),
        ));
    }
    let mut r = rng::substream(seed, 0x6E4);
    let mut p = Params::new();
    let s = spec.num_stages();
    let c0 = spec.stage_channels[s - 1];
    let side0 = spec.spatial_side(s - 1);
    let init_out = c0 * side0 * side0;
    p.weight(
        "generator/embed",
        rng::normal_tensor(&mut r, &[spec.num_classes, cfg.embed_dim], 1.0),
    );
    nn::add_linear(
        &mut p,
        &mut r,
        "generator/init/z",
        cfg.latent_dim,
        init_out,
        true,
    );
    nn::add_linear(
        &mut p,
        &mut r,
        "generator/init/fc7",
        spec.fc_dim + 1,
        init_out,
        true,
    );
    nn::add_linear(
        &mut p,
        &mut r,
        "generator/init/fc8",
        spec.num_classes + 1,
        init_out,
        true,
    );
    for k in 0..s {
        let name = block_name(k);
        let (cin, cout) = block_channels(spec, k);
        nn::add_cond_batch_norm(&mut p, &mut r, &format!("{name}/cbn1"), cin, cfg.embed_dim);
        nn::add_conv(&mut p, &mut r, &format!("{name}/conv1"), cin, cout, 3, true);
        nn::add_cond_batch_norm(&mut p, &mut r, &format!("{name}/cbn2"), cout, cfg.embed_dim);
        nn::add_conv(
            &mut p,
            &mut r,
            &format!("{name}/conv2"),
            cout,
            cout,
            3,
            true,
        );
        if cin != cout {
            nn::add_conv(&mut p, &mut r, &format!("{name}/skip"), cin, cout, 1, true);
        }
        let level_ch = spec.stage_channels[block_level(spec, k)];
        nn::add_conv(
            &mut p,
            &mut r,
            &format!("{name}/fuse"),
            level_ch + 1,
            cout,
            3,
            false,
        );
    }
    if cfg.attention {
        nn::add_self_attention(&mut p, &mut r, "generator/attn", spec.stage_channels[0]);
    }
    nn::add_batch_norm(&mut p, "generator/out/bn", spec.stage_channels[0]);
    nn::add_conv(
        &mut p,
        &mut r,
        "generator/out/conv",
        spec.stage_channels[0],
        3,
        3,
        true,
    );
    Ok(p)
}

impl GeneratorParams {
    pub fn init(spec: &ClassifierSpec, cfg: &GeneratorConfig, seed: u64) -> Result<Self> {
        Ok(GeneratorParams {
            spec: spec.clone(),
            config: cfg.clone(),
            arrays: init_arrays(spec, cfg, seed)?,
        })
    }

    pub fn digest(&self) -> [u8; 32] {
        self.arrays.digest()
    }
}

/// Graph inputs for one generator forward pass over a batch of `N`.
pub struct GeneratorInputs<'a> {
    /// `[N, latent_dim]`
    pub z: Var,
    /// One `[N, ..]` activation per level, fine to deep.
    pub features: &'a [Var],
    /// One `[N, 1, H, W]` / `[N, 1]` gate per level.
    pub masks: &'a [Var],
    pub labels: &'a [usize],
}

/// `[f * m | m]`
fn gated_with_indicator<T: Real>(g: &mut Graph<T>, f: Var, m: Var) -> Var {
    let gated = g.mul_channel_broadcast(f, m);
    g.concat_channels(gated, m)
}

/// Coarsest spatial map from noise and the gated FC levels.
#[allow(clippy::too_many_arguments)]
pub fn initial_block<T: Real>(
    b: &mut Binder<'_, T>,
    g: &mut Graph<T>,
    spec: &ClassifierSpec,
    z: Var,
    fc7: Var,
    m7: Var,
    fc8: Var,
    m8: Var,
) -> Result<Var> {
    let n = g.shape(z)[0];
    for (v, what) in [
        (fc7, "fc7"),
        (m7, "fc7 mask"),
        (fc8, "fc8"),
        (m8, "fc8 mask"),
    ] {
        if g.shape(v)[0] != n {
            return Err(Error::Shape(format!(
                "{what} batch {:?} vs noise {:?}",
                g.shape(v),
                g.shape(z)
            )));
        }
    }
    let hz = nn::linear(b, g, z, "generator/init/z")?;
    let in7 = gated_with_indicator(g, fc7, m7);
    let h7 = nn::linear(b, g, in7, "generator/init/fc7")?;
    let in8 = gated_with_indicator(g, fc8, m8);
    let h8 = nn::linear(b, g, in8, "generator/init/fc8")?;
    let h = g.add(hz, h7);
    let h = g.add(h, h8);
    let s = spec.num_stages();
    let side = spec.spatial_side(s - 1);
    Ok(g.reshape(h, &[n, spec.stage_channels[s - 1], side, side]))
}

/// Residual path of generator block `k`.
pub fn res_block<T: Real>(
    b: &mut Binder<'_, T>,
    g: &mut Graph<T>,
    k: usize,
    x: Var,
    embedding: Var,
) -> Result<Var> {
    let name = block_name(k);
    let h = nn::cond_batch_norm(b, g, x, embedding, &format!("{name}/cbn1"))?;
    let h = g.relu(h);
    let (h, skip_in) = if k > 0 {
        (g.upsample2(h), g.upsample2(x))
    } else {
        (h, x)
    };
    let h = nn::conv(b, g, h, &format!("{name}/conv1"))?;
    let h = nn::cond_batch_norm(b, g, h, embedding, &format!("{name}/cbn2"))?;
    let h = g.relu(h);
    let h = nn::conv(b, g, h, &format!("{name}/conv2"))?;
    let skip_name = format!("{name}/skip");
    let skip = if b.params.contains(&format!("{skip_name}/w")) {
        nn::conv(b, g, skip_in, &skip_name)?
    } else {
        skip_in
    };
    Ok(g.add(h, skip))
}

/// Bias-free conv of the gated level features with the mask appended.
pub fn fusion_term<T: Real>(
    b: &mut Binder<'_, T>,
    g: &mut Graph<T>,
    k: usize,
    f: Var,
    m: Var,
) -> Result<Var> {
    let x = gated_with_indicator(g, f, m);
    nn::conv(b, g, x, &format!("{}/fuse", block_name(k)))
}

/// `res_block(upstream) + fusion_term(f, m)`.
pub fn fusion_block<T: Real>(
    b: &mut Binder<'_, T>,
    g: &mut Graph<T>,
    k: usize,
    upstream: Var,
    f: Var,
    m: Var,
    embedding: Var,
) -> Result<Var> {
    let res = res_block(b, g, k, upstream, embedding)?;
    if g.shape(res)[2..] != g.shape(f)[2..] {
        return Err(Error::Shape(format!(
            "block {} output {:?} does not match level features {:?}",
            k + 1,
            g.shape(res),
            g.shape(f)
        )));
    }
    let fuse = fusion_term(b, g, k, f, m)?;
    Ok(g.add(res, fuse))
}

pub fn class_embedding<T: Real>(
    b: &mut Binder<'_, T>,
    g: &mut Graph<T>,
    spec: &ClassifierSpec,
    labels: &[usize],
) -> Result<Var> {
    for &l in labels {
        ClassLabel(l).check(spec.num_classes)?;
    }
    let table = b.var(g, "generator/embed")?;
    Ok(g.embedding(table, labels))
}

fn check_inputs<T: Real>(
    g: &Graph<T>,
    spec: &ClassifierSpec,
    cfg: &GeneratorConfig,
    inp: &GeneratorInputs<'_>,
) -> Result<usize> {
    let zs = g.shape(inp.z);
    if zs.len() != 2 || zs[1] != cfg.latent_dim {
        return Err(Error::Shape(format!(
            "noise {:?}, expected [N, {}]",
            zs, cfg.latent_dim
        )));
    }
    let n = zs[0];
    if inp.features.len() != spec.num_levels() || inp.masks.len() != spec.num_levels() {
        return Err(Error::Shape(format!(
            "{} feature and {} mask levels for a {}-level pyramid",
            inp.features.len(),
            inp.masks.len(),
            spec.num_levels()
        )));
    }
    if inp.labels.len() != n {
        return Err(Error::Shape(format!(
            "{} labels for a batch of {}",
            inp.labels.len(),
            n
        )));
    }
    for i in 0..spec.num_levels() {
        let mut fshape = alloc::vec![n];
        fshape.extend(spec.level_shape(i));
        let mut mshape = alloc::vec![n, 1];
        if spec.is_spatial(i) {
            let s = spec.spatial_side(i);
            mshape.extend([s, s]);
        }
        if g.shape(inp.features[i]) != fshape.as_slice()
            || g.shape(inp.masks[i]) != mshape.as_slice()
        {
            return Err(Error::Shape(format!(
                "level `{}`: features {:?} / mask {:?}, expected {:?} / {:?}",
                spec.level_name(i),
                g.shape(inp.features[i]),
                g.shape(inp.masks[i]),
                fshape,
                mshape
            )));
        }
    }
    Ok(n)
}

/// Full generator forward pass; returns `[N, 3, H, W]` images in `[-1, 1]`.
pub fn forward<T: Real>(
    b: &mut Binder<'_, T>,
    g: &mut Graph<T>,
    spec: &ClassifierSpec,
    cfg: &GeneratorConfig,
    inp: &GeneratorInputs<'_>,
) -> Result<Var> {
    check_inputs(g, spec, cfg, inp)?;
    let s = spec.num_stages();
    let emb = class_embedding(b, g, spec, inp.labels)?;
    let mut h = initial_block(
        b,
        g,
        spec,
        inp.z,
        inp.features[s],
        inp.masks[s],
        inp.features[s + 1],
        inp.masks[s + 1],
    )?;
    for k in 0..s {
        let l = block_level(spec, k);
        h = fusion_block(b, g, k, h, inp.features[l], inp.masks[l], emb)?;
        if cfg.attention && k == attention_block(spec) {
            h = nn::self_attention(b, g, h, "generator/attn")?;
        }
    }
    let h = nn::batch_norm(b, g, h, "generator/out/bn")?;
    let h = g.relu(h);
    let h = g.upsample2(h);
    let h = nn::conv(b, g, h, "generator/out/conv")?;
    Ok(g.tanh(h))
}

/// Host-side batch of generator inputs.
#[derive(Clone, Debug)]
pub struct GeneratorBatch {
    pub z: Tensor<f32>,
    pub features: Vec<Tensor<f32>>,
    pub masks: Vec<Tensor<f32>>,
    pub labels: Vec<usize>,
}

impl GeneratorBatch {
    /// One row per `(z, pyramid, masks, label)` tuple.
    pub fn from_parts(
        spec: &ClassifierSpec,
        zs: &[Vec<f32>],
        features: &[&FeaturePyramid],
        masks: &[&MaskPyramid],
        labels: &[usize],
    ) -> Result<Self> {
        let n = zs.len();
        if features.len() != n || masks.len() != n || labels.len() != n || n == 0 {
            return Err(Error::Shape(
                "generator batch parts have unequal lengths".into(),
            ));
        }
        for f in features {
            f.validate(spec)?;
        }
        for m in masks {
            m.validate(spec)?;
        }
        let dim = zs[0].len();
        let mut zdata = Vec::with_capacity(n * dim);
        for z in zs {
            if z.len() != dim {
                return Err(Error::Shape("noise vectors of unequal length".into()));
            }
            zdata.extend_from_slice(z);
        }
        Ok(GeneratorBatch {
            z: Tensor::from_vec(&[n, dim], zdata)?,
            features: FeaturePyramid::stack(features)?,
            masks: MaskPyramid::stack(masks)?,
            labels: labels.to_vec(),
        })
    }
}

/// Eval-mode generation for a host-side batch.
pub fn generate_batch(params: &GeneratorParams, batch: &GeneratorBatch) -> Result<Tensor<f32>> {
    let mut g = Graph::new();
    let mut b = Binder::frozen(&params.arrays, Mode::Eval);
    let z = g.constant(batch.z.clone());
    let features: Vec<Var> = batch
        .features
        .iter()
        .map(|t| g.constant(t.clone()))
        .collect();
    let masks: Vec<Var> = batch.masks.iter().map(|t| g.constant(t.clone())).collect();
    let out = forward(
        &mut b,
        &mut g,
        &params.spec,
        &params.config,
        &GeneratorInputs {
            z,
            features: &features,
            masks: &masks,
            labels: &batch.labels,
        },
    )?;
    Ok(g.value(out).clone())
}

/// Single-sample generation.
pub fn generate(
    params: &GeneratorParams,
    z: &[f32],
    features: &FeaturePyramid,
    masks: &MaskPyramid,
    label: ClassLabel,
) -> Result<Image> {
    label.check(params.spec.num_classes)?;
    if z.len() != params.config.latent_dim {
        return Err(Error::Shape(format!(
            "noise has {} entries, expected {}",
            z.len(),
            params.config.latent_dim
        )));
    }
    let batch = GeneratorBatch::from_parts(
        &params.spec,
        &[z.to_vec()],
        &[features],
        &[masks],
        &[label.0],
    )?;
    let out = generate_batch(params, &batch)?;
    Image::from_batch(&out, 0)
}

pub fn sample_noise(r: &mut Rng, dim: usize) -> Vec<f32> {
    rng::normal_vec(r, dim)
}

/// Resample every coordinate with `|z_i| > threshold` until it falls inside.
pub fn truncate_noise(z: &[f32], threshold: f32, r: &mut Rng) -> Result<Vec<f32>> {
    if !(threshold > 0.0) {
        return Err(Error::Parameter(format!(
            "truncation threshold must be positive, got {threshold}"
        )));
    }
    Ok(z.iter()
        .map(|&v| {
            let mut v = v;
            while v.abs() > threshold {
                v = rng::normal(r) as f32;
            }
            v
        })
        .collect())
}

pub fn sample_truncated(r: &mut Rng, dim: usize, threshold: f32) -> Result<Vec<f32>> {
    let z = sample_noise(r, dim);
    truncate_noise(&z, threshold, r)
}
