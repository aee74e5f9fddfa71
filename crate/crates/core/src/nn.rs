//! Layer building blocks shared by the classifier, generator and
//! discriminator. Each layer has a `add_*` constructor that registers its
//! arrays under a name prefix and a forward function that binds them.
//!
//! A weight `p/w` is spectrally normalized whenever a `p/w.u` buffer exists.

#[cfg(not(feature = "std"))]
use num_traits::Float as _;

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Binder, Mode, Params};
use crate::real::Real;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

const BN_MOMENTUM: f64 = 0.1;
const BN_EPS: f64 = 1e-5;

pub fn add_conv<T: Real>(
    p: &mut Params<T>,
    r: &mut Rng,
    name: &str,
    in_ch: usize,
    out_ch: usize,
    k: usize,
    bias: bool,
) {
    let std = (2.0 / (in_ch * k * k) as f64).sqrt();
    p.weight(
        format!("{name}/w"),
        rng::normal_tensor(r, &[out_ch, in_ch, k, k], std),
    );
    if bias {
        p.weight(format!("{name}/b"), Tensor::zeros(&[out_ch]));
    }
}

pub fn add_linear<T: Real>(
    p: &mut Params<T>,
    r: &mut Rng,
    name: &str,
    in_dim: usize,
    out_dim: usize,
    bias: bool,
) {
    let std = (1.0 / in_dim as f64).sqrt();
    p.weight(
        format!("{name}/w"),
        rng::normal_tensor(r, &[out_dim, in_dim], std),
    );
    if bias {
        p.weight(format!("{name}/b"), Tensor::zeros(&[out_dim]));
    }
}

/// Register a power-iteration vector for the weight `{name}/w`.
pub fn add_spectral<T: Real>(p: &mut Params<T>, r: &mut Rng, name: &str) -> Result<()> {
    let rows = p.get(&format!("{name}/w"))?.shape()[0];
    let mut u: Tensor<T> = rng::normal_tensor(r, &[rows], 1.0);
    normalize(u.data_mut());
    p.buffer(format!("{name}/w.u"), u);
    Ok(())
}

pub fn add_batch_norm<T: Real>(p: &mut Params<T>, name: &str, ch: usize) {
    p.weight(format!("{name}/gamma"), Tensor::ones(&[1, ch]));
    p.weight(format!("{name}/beta"), Tensor::zeros(&[1, ch]));
    add_running_stats(p, name, ch);
}

fn add_running_stats<T: Real>(p: &mut Params<T>, name: &str, ch: usize) {
    p.buffer(format!("{name}/running_mean"), Tensor::zeros(&[ch]));
    p.buffer(format!("{name}/running_var"), Tensor::ones(&[ch]));
}

/// Class-conditional batch norm: per-channel scale and shift are affine
/// functions of a class embedding of width `embed_dim`.
pub fn add_cond_batch_norm<T: Real>(
    p: &mut Params<T>,
    r: &mut Rng,
    name: &str,
    ch: usize,
    embed_dim: usize,
) {
    let std = 0.5 / (embed_dim as f64).sqrt();
    p.weight(
        format!("{name}/gamma/w"),
        rng::normal_tensor(r, &[ch, embed_dim], std),
    );
    p.weight(format!("{name}/gamma/b"), Tensor::ones(&[ch]));
    p.weight(
        format!("{name}/beta/w"),
        rng::normal_tensor(r, &[ch, embed_dim], std),
    );
    p.weight(format!("{name}/beta/b"), Tensor::zeros(&[ch]));
    add_running_stats(p, name, ch);
}

pub fn attention_key_width(ch: usize) -> usize {
    (ch / 8).max(1)
}

pub fn add_self_attention<T: Real>(p: &mut Params<T>, r: &mut Rng, name: &str, ch: usize) {
    let kw = attention_key_width(ch);
    add_conv(p, r, &format!("{name}/query"), ch, kw, 1, false);
    add_conv(p, r, &format!("{name}/key"), ch, kw, 1, false);
    add_conv(p, r, &format!("{name}/value"), ch, ch, 1, false);
    p.weight(format!("{name}/gamma"), Tensor::zeros(&[1]));
}

pub(crate) fn normalize<T: Real>(v: &mut [T]) {
    let n = v.iter().map(|&x| x * x).sum::<T>().sqrt().max(T::of(1e-12));
    for x in v {
        *x /= n;
    }
}

/// One power-iteration step for `w` viewed as `[rows, cols]`, starting from
/// the left vector `u`. Returns the updated `(u, v)`.
pub fn power_iteration<T: Real>(w: &Tensor<T>, u: &[T]) -> (Vec<T>, Vec<T>) {
    let rows = w.shape()[0];
    let cols = w.per_sample();
    let d = w.data();
    let mut v = alloc::vec![T::zero(); cols];
    for i in 0..rows {
        let ui = u[i];
        for (vj, &wij) in v.iter_mut().zip(&d[i * cols..(i + 1) * cols]) {
            *vj += wij * ui;
        }
    }
    normalize(&mut v);
    let mut u2: Vec<T> = (0..rows)
        .map(|i| {
            d[i * cols..(i + 1) * cols]
                .iter()
                .zip(&v)
                .map(|(&a, &b)| a * b)
                .sum()
        })
        .collect();
    normalize(&mut u2);
    (u2, v)
}

/// Bind `{name}/w`, applying spectral normalization when `{name}/w.u` exists.
pub fn weight<T: Real>(b: &mut Binder<'_, T>, g: &mut Graph<T>, name: &str) -> Result<Var> {
    let wname = format!("{name}/w");
    let w = b.var(g, &wname)?;
    let uname = format!("{wname}.u");
    if !b.params.contains(&uname) {
        return Ok(w);
    }
    let u = b.tensor(&uname)?;
    let (u2, v) = power_iteration(g.value(w), u.data());
    let out = g.spectral_norm(w, &u2, &v);
    b.record_buffer(uname, Tensor::from_vec(&[u2.len()], u2)?);
    Ok(out)
}

fn optional_bias<T: Real>(
    b: &mut Binder<'_, T>,
    g: &mut Graph<T>,
    name: &str,
) -> Result<Option<Var>> {
    let bname = format!("{name}/b");
    if b.params.contains(&bname) {
        Ok(Some(b.var(g, &bname)?))
    } else {
        Ok(None)
    }
}

pub fn conv<T: Real>(b: &mut Binder<'_, T>, g: &mut Graph<T>, x: Var, name: &str) -> Result<Var> {
    let w = weight(b, g, name)?;
    let bias = optional_bias(b, g, name)?;
    let ws = g.shape(w);
    let xs = g.shape(x);
    if xs.len() != 4 || ws[1] != xs[1] {
        return Err(Error::Shape(format!(
            "conv `{name}` expects {} input channels, got {:?}",
            ws[1], xs
        )));
    }
    Ok(g.conv2d(x, w, bias))
}

pub fn linear<T: Real>(b: &mut Binder<'_, T>, g: &mut Graph<T>, x: Var, name: &str) -> Result<Var> {
    let w = weight(b, g, name)?;
    let bias = optional_bias(b, g, name)?;
    let fan_in = g.value(w).per_sample();
    if g.value(x).per_sample() != fan_in {
        return Err(Error::Shape(format!(
            "linear `{name}` expects {} inputs, got {:?}",
            fan_in,
            g.shape(x)
        )));
    }
    Ok(g.linear(x, w, bias))
}

/// Normalize per channel: batch statistics in training mode (recording
/// running-statistic updates), stored running statistics in eval mode.
fn normalize_channels<T: Real>(
    b: &mut Binder<'_, T>,
    g: &mut Graph<T>,
    x: Var,
    name: &str,
) -> Result<Var> {
    let ch = g.shape(x)[1];
    let rm = b.tensor(&format!("{name}/running_mean"))?;
    let rv = b.tensor(&format!("{name}/running_var"))?;
    if rm.len() != ch {
        return Err(Error::Shape(format!(
            "norm `{name}` has {} channels, input {:?}",
            rm.len(),
            g.shape(x)
        )));
    }
    match b.mode {
        Mode::Train => {
            let xh = g.batch_norm(x);
            let (mean, var) = g.batch_stats(xh).expect("batch norm records stats");
            let count = g.value(x).len() / ch;
            let unbias = if count > 1 {
                T::of(count as f64 / (count - 1) as f64)
            } else {
                T::one()
            };
            let mom = T::of(BN_MOMENTUM);
            let new_mean =
                Tensor::from_fn(&[ch], |c| (T::one() - mom) * rm.data()[c] + mom * mean[c]);
            let new_var = Tensor::from_fn(&[ch], |c| {
                (T::one() - mom) * rv.data()[c] + mom * var[c] * unbias
            });
            b.record_buffer(format!("{name}/running_mean"), new_mean);
            b.record_buffer(format!("{name}/running_var"), new_var);
            Ok(xh)
        }
        Mode::Eval => {
            let scale = Tensor::from_fn(&[1, ch], |c| {
                T::one() / (rv.data()[c] + T::of(BN_EPS)).sqrt()
            });
            let shift = Tensor::from_fn(&[1, ch], |c| -rm.data()[c] * scale.data()[c]);
            let s = g.constant(scale);
            let h = g.constant(shift);
            Ok(g.channel_affine(x, s, h))
        }
    }
}

pub fn batch_norm<T: Real>(
    b: &mut Binder<'_, T>,
    g: &mut Graph<T>,
    x: Var,
    name: &str,
) -> Result<Var> {
    let xh = normalize_channels(b, g, x, name)?;
    let gamma = b.var(g, &format!("{name}/gamma"))?;
    let beta = b.var(g, &format!("{name}/beta"))?;
    Ok(g.channel_affine(xh, gamma, beta))
}

/// Per-channel `(scale, shift)` predicted from a `[N, E]` class embedding.
pub fn cond_affine<T: Real>(
    b: &mut Binder<'_, T>,
    g: &mut Graph<T>,
    embedding: Var,
    name: &str,
) -> Result<(Var, Var)> {
    let gamma = linear(b, g, embedding, &format!("{name}/gamma"))?;
    let beta = linear(b, g, embedding, &format!("{name}/beta"))?;
    Ok((gamma, beta))
}

pub fn cond_batch_norm<T: Real>(
    b: &mut Binder<'_, T>,
    g: &mut Graph<T>,
    x: Var,
    embedding: Var,
    name: &str,
) -> Result<Var> {
    let xh = normalize_channels(b, g, x, name)?;
    let (gamma, beta) = cond_affine(b, g, embedding, name)?;
    Ok(g.channel_affine(xh, gamma, beta))
}

/// Row-stochastic attention map `[N, HW, HW]` from query and key projections.
pub fn attention_map<T: Real>(
    b: &mut Binder<'_, T>,
    g: &mut Graph<T>,
    x: Var,
    name: &str,
) -> Result<Var> {
    let (n, _, h, w) = dims4(g, x)?;
    let q = conv(b, g, x, &format!("{name}/query"))?;
    let k = conv(b, g, x, &format!("{name}/key"))?;
    let kw = g.shape(q)[1];
    let q = g.reshape(q, &[n, kw, h * w]);
    let k = g.reshape(k, &[n, kw, h * w]);
    let scores = g.bmm(q, k, true, false);
    Ok(g.softmax_rows(scores))
}

/// `x + gamma * attend(x)` with a learnable scalar `gamma`.
pub fn self_attention<T: Real>(
    b: &mut Binder<'_, T>,
    g: &mut Graph<T>,
    x: Var,
    name: &str,
) -> Result<Var> {
    let (n, c, h, w) = dims4(g, x)?;
    let attn = attention_map(b, g, x, name)?;
    let v = conv(b, g, x, &format!("{name}/value"))?;
    let v = g.reshape(v, &[n, c, h * w]);
    let o = g.bmm(v, attn, false, true);
    let o = g.reshape(o, &[n, c, h, w]);
    let gamma = b.var(g, &format!("{name}/gamma"))?;
    let o = g.mul_scalar_var(o, gamma);
    Ok(g.add(x, o))
}

pub fn dims4<T: Real>(g: &Graph<T>, x: Var) -> Result<(usize, usize, usize, usize)> {
    let s = g.shape(x);
    if s.len() != 4 {
        return Err(Error::Shape(format!(
            "expected NCHW activations, got {:?}",
            s
        )));
    }
    Ok((s[0], s[1], s[2], s[3]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn power_iteration_converges_to_top_singular_value() {
        // diag(3, 1) embedded in a 2x3 matrix
        let w =
            Tensor::<f64>::from_vec(&[2, 3], alloc::vec![3.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let mut u = alloc::vec![0.6, 0.8];
        for _ in 0..50 {
            u = power_iteration(&w, &u).0;
        }
        let (u, v) = power_iteration(&w, &u);
        let sigma: f64 = (0..2)
            .map(|i| u[i] * (0..3).map(|j| w.data()[i * 3 + j] * v[j]).sum::<f64>())
            .sum();
        assert!((sigma - 3.0).abs() < 1e-9);
    }

    #[test]
    fn zero_gamma_attention_is_identity() {
        let mut p = Params::<f64>::new();
        let mut r = rng::seeded(0);
        add_self_attention(&mut p, &mut r, "a", 8);
        let mut g = Graph::new();
        let x = g.constant(rng::normal_tensor(&mut r, &[2, 8, 4, 4], 1.0));
        let mut b = Binder::frozen(&p, Mode::Eval);
        let y = self_attention(&mut b, &mut g, x, "a").unwrap();
        assert_eq!(g.value(y), g.value(x));
    }
}
