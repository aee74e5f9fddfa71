//! Class-projection discriminator with spectrally normalized weights.
//!
//! One downsampling residual block per classifier stage (same widths),
//! self-attention after the first block, then ReLU, global sum pooling and a
//! linear score plus the inner product with a class embedding.

#[cfg(not(feature = "std"))]
use num_traits::Float as _;

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::backbone::ClassifierSpec;
use crate::data::ClassLabel;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image::Image;
use crate::nn;
use crate::params::{Binder, Mode, Params};
use crate::real::Real;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DiscriminatorConfig {
    pub attention: bool,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig { attention: true }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorParams {
    pub spec: ClassifierSpec,
    pub config: DiscriminatorConfig,
    pub arrays: Params<f32>,
}

fn block_name(k: usize) -> String {
    format!("discriminator/block{}", k + 1)
}

pub fn init_arrays<T: Real>(
    spec: &ClassifierSpec,
    cfg: &DiscriminatorConfig,
    seed: u64,
) -> Result<Params<T>> {
    spec.validate()?;
    let mut r = rng::substream(seed, 0xD15);
    let mut p = Params::new();
    let mut sn = Vec::new();
    let mut cin = 3;
    for (k, &cout) in spec.stage_channels.iter().enumerate() {
        let name = block_name(k);
        nn::add_conv(&mut p, &mut r, &format!("{name}/conv1"), cin, cout, 3, true);
        nn::add_conv(
            &mut p,
            &mut r,
            &format!("{name}/conv2"),
            cout,
            cout,
            3,
            true,
        );
        nn::add_conv(&mut p, &mut r, &format!("{name}/skip"), cin, cout, 1, true);
        for part in ["conv1", "conv2", "skip"] {
            sn.push(format!("{name}/{part}"));
        }
        if k == 0 && cfg.attention {
            nn::add_self_attention(&mut p, &mut r, "discriminator/attn", cout);
            for part in ["query", "key", "value"] {
                sn.push(format!("discriminator/attn/{part}"));
            }
        }
        cin = cout;
    }
    nn::add_linear(&mut p, &mut r, "discriminator/head", cin, 1, true);
    sn.push("discriminator/head".into());
    p.weight(
        "discriminator/embed/w",
        rng::normal_tensor(&mut r, &[spec.num_classes, cin], (1.0 / cin as f64).sqrt()),
    );
    sn.push("discriminator/embed".into());
    for name in sn {
        nn::add_spectral(&mut p, &mut r, &name)?;
    }
    Ok(p)
}

impl DiscriminatorParams {
    pub fn init(spec: &ClassifierSpec, cfg: &DiscriminatorConfig, seed: u64) -> Result<Self> {
        Ok(DiscriminatorParams {
            spec: spec.clone(),
            config: cfg.clone(),
            arrays: init_arrays(spec, cfg, seed)?,
        })
    }
}

fn down_block<T: Real>(b: &mut Binder<'_, T>, g: &mut Graph<T>, k: usize, x: Var) -> Result<Var> {
    let name = block_name(k);
    // The raw image is not pre-activated.
    let h = if k == 0 { x } else { g.relu(x) };
    let h = nn::conv(b, g, h, &format!("{name}/conv1"))?;
    let h = g.relu(h);
    let h = nn::conv(b, g, h, &format!("{name}/conv2"))?;
    let h = g.avg_pool2(h);
    let s = nn::conv(b, g, x, &format!("{name}/skip"))?;
    let s = g.avg_pool2(s);
    Ok(g.add(h, s))
}

/// Scores `[N, 1]` for images `[N, 3, H, W]` under their labels.
pub fn forward<T: Real>(
    b: &mut Binder<'_, T>,
    g: &mut Graph<T>,
    spec: &ClassifierSpec,
    cfg: &DiscriminatorConfig,
    x: Var,
    labels: &[usize],
) -> Result<Var> {
    let (n, c, h, w) = nn::dims4(g, x)?;
    if c != 3 || h != spec.input_size || w != spec.input_size {
        return Err(Error::Shape(format!(
            "discriminator expects [N, 3, {s}, {s}], got {:?}",
            g.shape(x),
            s = spec.input_size
        )));
    }
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "{} labels for a batch of {}",
            labels.len(),
            n
        )));
    }
    for &l in labels {
        ClassLabel(l).check(spec.num_classes)?;
    }
    let mut h = x;
    for k in 0..spec.num_stages() {
        h = down_block(b, g, k, h)?;
        if k == 0 && cfg.attention {
            h = nn::self_attention(b, g, h, "discriminator/attn")?;
        }
    }
    let h = g.relu(h);
    let pooled = g.global_sum_pool(h);
    let score = nn::linear(b, g, pooled, "discriminator/head")?;
    let table = nn::weight(b, g, "discriminator/embed")?;
    let e = g.embedding(table, labels);
    let proj = g.mul(pooled, e);
    let proj = g.row_sums(proj);
    Ok(g.add(score, proj))
}

/// Eval-mode scores for a batch of images. Power-iteration vectors are left
/// untouched.
pub fn discriminate_batch(
    params: &DiscriminatorParams,
    images: &Tensor<f32>,
    labels: &[usize],
) -> Result<Vec<f32>> {
    let mut g = Graph::new();
    let mut b = Binder::frozen(&params.arrays, Mode::Eval);
    let x = g.constant(images.clone());
    let s = forward(&mut b, &mut g, &params.spec, &params.config, x, labels)?;
    Ok(g.value(s).data().to_vec())
}

pub fn discriminate(params: &DiscriminatorParams, image: &Image, label: ClassLabel) -> Result<f32> {
    Ok(discriminate_batch(params, &image.to_tensor(), &[label.0])?[0])
}
