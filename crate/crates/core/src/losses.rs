//! Training objective: least-squares adversarial terms, the masked semantic
//! reconstruction term and the mode-seeking diversity term.
//!
//! Every term has a scalar form for single instances and a graph form used
//! by the trainer. Norms are means, so values do not scale with resolution.

#[cfg(not(feature = "std"))]
use num_traits::Float as _;

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image::Image;
use crate::pyramid::{FeaturePyramid, MaskPyramid};
use crate::real::Real;
use crate::tensor::Tensor;

/// Keeps `sqrt` differentiable when both maps of a level are exactly zero.
const SQRT_FLOOR: f64 = 1e-30;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub eps_div: f64,
    pub eps_norm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.1,
            beta: 0.1,
            eps_div: 1e-5,
            eps_norm: 1e-8,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be nonnegative (alpha {}, beta {})",
                self.alpha, self.beta
            )));
        }
        if !(self.eps_div > 0.0 && self.eps_norm > 0.0) {
            return Err(Error::Config("epsilon values must be positive".into()));
        }
        Ok(())
    }
}

pub fn lsgan_d_loss(score_real: f64, score_fake: f64) -> f64 {
    (score_real - 1.0).powi(2) + score_fake.powi(2)
}

pub fn lsgan_g_loss(score_fake: f64) -> f64 {
    (score_fake - 1.0).powi(2)
}

pub fn generator_objective(adv: f64, rec: f64, div: f64, w: &LossWeights) -> f64 {
    adv + w.alpha * rec + w.beta * div
}

/// Batch mean of `(D(x) - 1)^2 + D(G)^2` for score columns `[N, 1]`.
pub fn lsgan_d_graph<T: Real>(g: &mut Graph<T>, real: Var, fake: Var) -> Var {
    let r = g.add_scalar(real, -T::one());
    let r = g.square(r);
    let r = g.mean(r);
    let f = g.square(fake);
    let f = g.mean(f);
    g.add(r, f)
}

pub fn lsgan_g_graph<T: Real>(g: &mut Graph<T>, fake: Var) -> Var {
    let f = g.add_scalar(fake, -T::one());
    let f = g.square(f);
    g.mean(f)
}

/// 2x2 min-pool of a `[N, 1, H, W]` gate: a pooled cell is on only when all
/// four contributors are on.
pub fn min_pool_mask<T: Real>(m: &Tensor<T>) -> Tensor<T> {
    let s = m.shape();
    let (n, h, w) = (s[0], s[2], s[3]);
    let (ho, wo) = (h / 2, w / 2);
    let d = m.data();
    Tensor::from_fn(&[n, 1, ho, wo], |i| {
        let (b, r) = (i / (ho * wo), i % (ho * wo));
        let (y, x) = (2 * (r / wo), 2 * (r % wo));
        let at = |yy: usize, xx: usize| d[b * h * w + yy * w + xx];
        at(y, x)
            .min(at(y, x + 1))
            .min(at(y + 1, x))
            .min(at(y + 1, x + 1))
    })
}

/// Multiply each batch row of `x` by the matching entry of `s: [N, 1]`.
fn scale_rows<T: Real>(g: &mut Graph<T>, x: Var, s: Var) -> Var {
    let shape = g.shape(x).to_vec();
    let n = shape[0];
    let per: usize = shape[1..].iter().product();
    let flat = g.reshape(x, &[n, per, 1]);
    let s3 = g.reshape(s, &[n, 1, 1]);
    let y = g.mul_channel_broadcast(flat, s3);
    g.reshape(y, &shape)
}

/// One level of the reconstruction term, averaged over the batch.
///
/// `orig`, `gen`: `[N, C, H, W]` or `[N, D]`; `mask`: `[N, 1, H, W]` or `[N, 1]`.
pub fn reconstruction_level_graph<T: Real>(
    g: &mut Graph<T>,
    orig: Var,
    gen: Var,
    mask: &Tensor<T>,
    eps_norm: f64,
) -> Result<Var> {
    let shape = g.shape(orig).to_vec();
    if g.shape(gen) != shape.as_slice() {
        return Err(Error::Shape(format!(
            "reconstruction: {:?} vs {:?}",
            shape,
            g.shape(gen)
        )));
    }
    let n = shape[0];
    let spatial = shape.len() == 4;
    let expected_mask: Vec<usize> = if spatial {
        alloc::vec![n, 1, shape[2], shape[3]]
    } else {
        alloc::vec![n, 1]
    };
    if mask.shape() != expected_mask.as_slice() {
        return Err(Error::Shape(format!(
            "reconstruction mask {:?}, expected {:?}",
            mask.shape(),
            expected_mask
        )));
    }
    let per: usize = shape[1..].iter().product();

    // Shared RMS of both maps, per sample.
    let sa = g.square(orig);
    let sa = g.row_sums(sa);
    let sb = g.square(gen);
    let sb = g.row_sums(sb);
    let ss = g.add(sa, sb);
    let ms = g.scale(ss, T::of(1.0 / (2 * per) as f64));
    let ms = g.add_scalar(ms, T::of(SQRT_FLOOR));
    let rms = g.sqrt(ms);
    let denom = g.add_scalar(rms, T::of(eps_norm));
    let ones = g.constant(Tensor::ones(&[n, 1]));
    let inv = g.div(ones, denom);
    let a = scale_rows(g, orig, inv);
    let b = scale_rows(g, gen, inv);

    let pool = spatial && shape[2] >= 2 && shape[3] >= 2;
    let (a, b, m) = if pool {
        (g.max_pool2(a), g.max_pool2(b), min_pool_mask(mask))
    } else {
        (a, b, mask.clone())
    };
    let channels = if spatial { g.shape(a)[1] } else { per };
    let weights = Tensor::from_fn(&[n, 1], |i| {
        let on: T = m.data()[i * m.per_sample()..(i + 1) * m.per_sample()]
            .iter()
            .copied()
            .sum();
        if on > T::zero() {
            T::one() / (on * T::of(channels as f64))
        } else {
            T::zero()
        }
    });
    let diff = g.sub(a, b);
    let diff = g.abs(diff);
    let mv = g.constant(m);
    let masked = g.mul_channel_broadcast(diff, mv);
    let sums = g.row_sums(masked);
    let wv = g.constant(weights);
    let per_sample = g.mul(sums, wv);
    Ok(g.mean(per_sample))
}

/// Sum over levels of the per-level reconstruction term.
pub fn reconstruction_graph<T: Real>(
    g: &mut Graph<T>,
    orig: &[Var],
    gen: &[Var],
    masks: &[Tensor<T>],
    eps_norm: f64,
) -> Result<Var> {
    if orig.len() != gen.len() || orig.len() != masks.len() || orig.is_empty() {
        return Err(Error::Shape(format!(
            "reconstruction over {} / {} / {} levels",
            orig.len(),
            gen.len(),
            masks.len()
        )));
    }
    let mut total = None;
    for ((&a, &b), m) in orig.iter().zip(gen).zip(masks) {
        let l = reconstruction_level_graph(g, a, b, m, eps_norm)?;
        total = Some(match total {
            None => l,
            Some(t) => g.add(t, l),
        });
    }
    Ok(total.expect("at least one level"))
}

fn level_tensor<T: Real>(t: &Tensor<f32>) -> Tensor<T> {
    let mut shape = alloc::vec![1];
    shape.extend_from_slice(t.shape());
    t.cast::<T>().reshape(&shape).expect("same length")
}

/// Reconstruction term for a single pyramid pair.
pub fn reconstruction_loss(
    f_orig: &FeaturePyramid,
    f_gen: &FeaturePyramid,
    masks: &MaskPyramid,
    eps_norm: f64,
) -> Result<f64> {
    if f_orig.len() != f_gen.len() || f_orig.len() != masks.levels.len() {
        return Err(Error::Shape("pyramids have different level counts".into()));
    }
    let mut g = Graph::<f64>::new();
    let mut a = Vec::new();
    let mut b = Vec::new();
    let mut m = Vec::new();
    for ((lo, lg), lm) in f_orig.levels.iter().zip(&f_gen.levels).zip(&masks.levels) {
        if lo.data.shape() != lg.data.shape() {
            return Err(Error::Shape(format!(
                "level `{}`: {:?} vs {:?}",
                lo.id,
                lo.data.shape(),
                lg.data.shape()
            )));
        }
        a.push(g.constant(level_tensor(&lo.data)));
        b.push(g.constant(level_tensor(&lg.data)));
        m.push(level_tensor(&lm.data));
    }
    let l = reconstruction_graph(&mut g, &a, &b, &m, eps_norm)?;
    Ok(g.scalar(l))
}

fn mean_abs_diff(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).abs())
        .sum::<f64>()
        / a.len().max(1) as f64
}

pub fn diversity_loss(
    z1: &[f32],
    z2: &[f32],
    img1: &Image,
    img2: &Image,
    eps_div: f64,
) -> Result<f64> {
    if z1.len() != z2.len() {
        return Err(Error::Shape(format!(
            "noise lengths {} vs {}",
            z1.len(),
            z2.len()
        )));
    }
    if img1.width() != img2.width() || img1.height() != img2.height() {
        return Err(Error::Shape("diversity pair images differ in size".into()));
    }
    let dz = mean_abs_diff(z1, z2);
    let dx = mean_abs_diff(img1.pixels(), img2.pixels());
    Ok(dz / (dx + eps_div))
}

/// Batch mean of the diversity ratio over `B` pairs.
///
/// `images` is `[2B, ...]` with row `i` paired with row `i + B`; `z_dist[i]`
/// is the mean absolute noise difference of pair `i`.
pub fn diversity_graph<T: Real>(
    g: &mut Graph<T>,
    images: Var,
    z_dist: &[T],
    eps_div: f64,
) -> Result<Var> {
    let n = g.shape(images)[0];
    let pairs = z_dist.len();
    if n != 2 * pairs || pairs == 0 {
        return Err(Error::Shape(format!(
            "{} images for {} diversity pairs",
            n, pairs
        )));
    }
    let per = g.value(images).per_sample();
    let a = g.slice_batch(images, 0, pairs);
    let b = g.slice_batch(images, pairs, pairs);
    let d = g.sub(a, b);
    let d = g.abs(d);
    let d = g.row_sums(d);
    let d = g.scale(d, T::of(1.0 / per as f64));
    let d = g.add_scalar(d, T::of(eps_div));
    let num = g.constant(Tensor::from_vec(&[pairs, 1], z_dist.to_vec())?);
    let ratio = g.div(num, d);
    Ok(g.mean(ratio))
}

pub fn noise_distance(z1: &[f32], z2: &[f32]) -> f64 {
    mean_abs_diff(z1, z2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lsgan_identities() {
        assert_eq!(lsgan_d_loss(1.0, 0.0), 0.0);
        assert_eq!(lsgan_d_loss(0.0, 1.0), 2.0);
        assert_eq!(lsgan_d_loss(0.5, 0.5), 0.5);
        assert_eq!(lsgan_g_loss(1.0), 0.0);
        assert_eq!(lsgan_g_loss(0.0), 1.0);
        assert_eq!(lsgan_g_loss(-1.0), 4.0);
    }

    #[test]
    fn objective_weights() {
        let w = LossWeights::default();
        assert_eq!(generator_objective(0.0, 0.0, 0.0, &w), 0.0);
        assert!((generator_objective(1.0, 1.0, 1.0, &w) - 1.2).abs() < 1e-12);
        assert!((generator_objective(2.0, 10.0, 0.0, &w) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn min_pool_requires_all_four() {
        let m = Tensor::from_vec(
            &[1, 1, 2, 4],
            alloc::vec![1.0f64, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 1.0],
        )
        .unwrap();
        assert_eq!(min_pool_mask(&m).data(), &[1.0, 0.0]);
    }

    #[test]
    fn graph_lsgan_matches_scalar() {
        let mut g = Graph::<f64>::new();
        let r = g.constant(Tensor::from_vec(&[2, 1], alloc::vec![0.3, 1.2]).unwrap());
        let f = g.constant(Tensor::from_vec(&[2, 1], alloc::vec![-0.4, 0.8]).unwrap());
        let d = lsgan_d_graph(&mut g, r, f);
        let want = (lsgan_d_loss(0.3, -0.4) + lsgan_d_loss(1.2, 0.8)) / 2.0;
        assert!((g.scalar(d) - want).abs() < 1e-12);
        let gl = lsgan_g_graph(&mut g, f);
        assert!((g.scalar(gl) - (lsgan_g_loss(-0.4) + lsgan_g_loss(0.8)) / 2.0).abs() < 1e-12);
    }
}
