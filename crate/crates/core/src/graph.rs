//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s; calling
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients into
//! every node that transitively depends on a leaf created with
//! `requires_grad = true`. Activations are laid out NCHW; "channel" ops treat
//! any shape `[N, C, rest..]` as `[N, C, S]` with `S = prod(rest)`.

use alloc::vec;
use alloc::vec::Vec;

use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const BN_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Abs(Var),
    Square(Var),
    Sqrt(Var),
    SumAll(Var),
    MeanAll(Var),
    MulScalarVar(Var, Var),
    DivScalarVar(Var, Var),
    MulChannelBroadcast(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        k: usize,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<u32>,
    },
    AvgPool2(Var),
    Upsample2(Var),
    ConcatChannels(Var, Var),
    Reshape(Var),
    SliceBatch {
        x: Var,
        start: usize,
    },
    BatchNorm {
        x: Var,
        inv_std: Vec<T>,
    },
    ChannelAffine {
        x: Var,
        scale: Var,
        shift: Var,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Bmm {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    SoftmaxRows(Var),
    GlobalSumPool(Var),
    RowSums(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    SpectralNorm {
        w: Var,
        u: Vec<T>,
        v: Vec<T>,
        sigma: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    batch_stats: Option<(Vec<T>, Vec<T>)>,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// `[N, C, S]` view of a tensor with at least two dimensions.
fn ncs(shape: &[usize]) -> (usize, usize, usize) {
    let n = shape[0];
    let c = if shape.len() > 1 { shape[1] } else { 1 };
    let s = shape.iter().skip(2).product();
    (n, c, s)
}

fn nchw(shape: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(shape.len(), 4, "expected NCHW tensor, got {:?}", shape);
    (shape[0], shape[1], shape[2], shape[3])
}

pub(crate) fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let pad = k / 2;
    let hw = h * w;
    for ch in 0..c {
        let plane = &x[ch * hw..(ch + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = ((ch * k + ki) * k + kj) * hw;
                let x0 = pad.saturating_sub(kj);
                let x1 = (w + pad).saturating_sub(kj).min(w);
                for y in 0..h {
                    let dst = &mut cols[row + y * w..row + (y + 1) * w];
                    let sy = y as isize + ki as isize - pad as isize;
                    if sy < 0 || sy >= h as isize || x0 >= x1 {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    dst[..x0].fill(T::zero());
                    dst[x1..].fill(T::zero());
                    let sx0 = x0 + kj - pad;
                    dst[x0..x1].copy_from_slice(&src[sx0..sx0 + (x1 - x0)]);
                }
            }
        }
    }
}

fn col2im_add<T: Real>(cols: &[T], c: usize, h: usize, w: usize, k: usize, x: &mut [T]) {
    let pad = k / 2;
    let hw = h * w;
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = ((ch * k + ki) * k + kj) * hw;
                let x0 = pad.saturating_sub(kj);
                let x1 = (w + pad).saturating_sub(kj).min(w);
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + ki as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &cols[row + y * w + x0..row + y * w + x1];
                    let base = ch * hw + sy as usize * w + x0 + kj - pad;
                    for (d, &s) in x[base..base + (x1 - x0)].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Per-channel `(mean, biased variance)` recorded by a batch-norm node.
    pub fn batch_stats(&self, v: Var) -> Option<(&[T], &[T])> {
        self.nodes[v.0]
            .batch_stats
            .as_ref()
            .map(|(m, var)| (m.as_slice(), var.as_slice()))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            batch_stats: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            batch_stats: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(
            ta.shape(),
            tb.shape(),
            "elementwise op on mismatched shapes"
        );
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::from_vec(ta.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_map(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_map(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_map(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_map(a, b, |x, y| x / y);
        self.push(out, Op::Div(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).scale(c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::AddScalar(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(T::zero()));
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let out = self
            .value(a)
            .map(|x| if x > T::zero() { x } else { x * slope });
        self.push(out, Op::LeakyRelu(a, slope), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.tanh());
        self.push(out, Op::Tanh(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.abs());
        self.push(out, Op::Abs(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        self.push(out, Op::Square(a), &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.sqrt());
        self.push(out, Op::Sqrt(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::SumAll(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).mean());
        self.push(out, Op::MeanAll(a), &[a])
    }

    /// `x * s` where `s` is a one-element tensor.
    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.value(s).len(), 1);
        let sv = self.scalar(s);
        let out = self.value(x).scale(sv);
        self.push(out, Op::MulScalarVar(x, s), &[x, s])
    }

    /// `x / s` where `s` is a one-element tensor.
    pub fn div_scalar_var(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.value(s).len(), 1);
        let sv = self.scalar(s);
        let out = self.value(x).map(|v| v / sv);
        self.push(out, Op::DivScalarVar(x, s), &[x, s])
    }

    /// Multiply `x: [N, C, S]` by `m: [N, 1, S]`, broadcasting over channels.
    pub fn mul_channel_broadcast(&mut self, x: Var, m: Var) -> Var {
        let (n, c, s) = ncs(self.shape(x));
        let (mn, mc, ms) = ncs(self.shape(m));
        assert!(
            mn == n && mc == 1 && ms == s,
            "mask {:?} not aligned with {:?}",
            self.shape(m),
            self.shape(x)
        );
        let xv = self.value(x);
        let mv = self.value(m).data();
        let mut out = xv.clone();
        for b in 0..n {
            let mrow = &mv[b * s..(b + 1) * s];
            for ch in 0..c {
                let base = (b * c + ch) * s;
                for (o, &mm) in out.data_mut()[base..base + s].iter_mut().zip(mrow) {
                    *o *= mm;
                }
            }
        }
        self.push(out, Op::MulChannelBroadcast(x, m), &[x, m])
    }

    /// `x @ w^T + b` with `x: [N, in..]`, `w: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let n = xv.batch();
        let fan_in = xv.per_sample();
        let out_dim = wv.shape()[0];
        assert_eq!(
            wv.per_sample(),
            fan_in,
            "linear: weight {:?} vs input {:?}",
            wv.shape(),
            xv.shape()
        );
        let mut out = Tensor::zeros(&[n, out_dim]);
        T::gemm(
            n,
            fan_in,
            out_dim,
            T::one(),
            xv.data(),
            fan_in as isize,
            1,
            wv.data(),
            1,
            fan_in as isize,
            T::zero(),
            out.data_mut(),
            out_dim as isize,
            1,
        );
        if let Some(b) = b {
            let bv = self.value(b).data();
            assert_eq!(bv.len(), out_dim);
            for row in out.data_mut().chunks_mut(out_dim) {
                for (o, &bb) in row.iter_mut().zip(bv) {
                    *o += bb;
                }
            }
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(out, Op::Linear { x, w, b }, &parents)
    }

    /// Stride-1 "same" convolution with an odd square kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (n, c, h, wd) = nchw(self.shape(x));
        let ws = self.shape(w).to_vec();
        assert!(
            ws.len() == 4 && ws[1] == c && ws[2] == ws[3] && ws[2] % 2 == 1,
            "conv2d: weight {:?} vs input {:?}",
            ws,
            self.shape(x)
        );
        let (o, k) = (ws[0], ws[2]);
        let hw = h * wd;
        let ckk = c * k * k;
        let mut out = Tensor::zeros(&[n, o, h, wd]);
        let mut cols = if k == 1 {
            Vec::new()
        } else {
            vec![T::zero(); ckk * hw]
        };
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let od = out.data_mut();
            for bi in 0..n {
                let xs = &xv[bi * c * hw..(bi + 1) * c * hw];
                let src: &[T] = if k == 1 {
                    xs
                } else {
                    im2col(xs, c, h, wd, k, &mut cols);
                    &cols
                };
                T::gemm(
                    o,
                    ckk,
                    hw,
                    T::one(),
                    wv,
                    ckk as isize,
                    1,
                    src,
                    hw as isize,
                    1,
                    T::zero(),
                    &mut od[bi * o * hw..(bi + 1) * o * hw],
                    hw as isize,
                    1,
                );
            }
        }
        if let Some(b) = b {
            let bv = self.value(b).data().to_vec();
            for (idx, plane) in out.data_mut().chunks_mut(hw).enumerate() {
                let bb = bv[idx % o];
                for v in plane {
                    *v += bb;
                }
            }
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(out, Op::Conv2d { x, w, b, k }, &parents)
    }

    pub fn max_pool2(&mut self, x: Var) -> Var {
        let (n, c, h, w) = nchw(self.shape(x));
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        let mut argmax = vec![0u32; n * c * oh * ow];
        let od = out.data_mut();
        for p in 0..n * c {
            let base = p * h * w;
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = base + 2 * y * w + 2 * xx;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * y + dy) * w + 2 * xx + dx;
                        if xv[idx] > xv[best] {
                            best = idx;
                        }
                    }
                    let oi = (p * oh + y) * ow + xx;
                    od[oi] = xv[best];
                    argmax[oi] = best as u32;
                }
            }
        }
        self.push(out, Op::MaxPool2 { x, argmax }, &[x])
    }

    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let (n, c, h, w) = nchw(self.shape(x));
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let quarter = T::of(0.25);
        let out = Tensor::from_fn(&[n, c, oh, ow], |i| {
            let p = i / (oh * ow);
            let y = (i / ow) % oh;
            let xx = i % ow;
            let base = p * h * w + 2 * y * w + 2 * xx;
            (xv[base] + xv[base + 1] + xv[base + w] + xv[base + w + 1]) * quarter
        });
        self.push(out, Op::AvgPool2(x), &[x])
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let (n, c, h, w) = nchw(self.shape(x));
        let xv = self.value(x).data();
        let (oh, ow) = (2 * h, 2 * w);
        let out = Tensor::from_fn(&[n, c, oh, ow], |i| {
            let p = i / (oh * ow);
            let y = (i / ow) % oh;
            let xx = i % ow;
            xv[p * h * w + (y / 2) * w + xx / 2]
        });
        self.push(out, Op::Upsample2(x), &[x])
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (n, ca, s) = ncs(self.shape(a));
        let (nb, cb, sb) = ncs(self.shape(b));
        assert!(
            n == nb && s == sb,
            "concat: {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        let mut shape = self.shape(a).to_vec();
        if shape.len() == 1 {
            shape.push(1);
        }
        shape[1] = ca + cb;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(n * (ca + cb) * s);
        for i in 0..n {
            data.extend_from_slice(&av[i * ca * s..(i + 1) * ca * s]);
            data.extend_from_slice(&bv[i * cb * s..(i + 1) * cb * s]);
        }
        let out = Tensor::from_vec(&shape, data).expect("concat shape");
        self.push(out, Op::ConcatChannels(a, b), &[a, b])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self
            .value(x)
            .clone()
            .reshape(shape)
            .expect("reshape preserves element count");
        self.push(out, Op::Reshape(x), &[x])
    }

    pub fn slice_batch(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice_batch(start, len);
        self.push(out, Op::SliceBatch { x, start }, &[x])
    }

    /// Normalize each channel with statistics over batch and spatial axes.
    /// The output carries no affine transform.
    pub fn batch_norm(&mut self, x: Var) -> Var {
        let (n, c, s) = ncs(self.shape(x));
        let m = T::of((n * s) as f64);
        let xv = self.value(x).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut acc = T::zero();
            for b in 0..n {
                acc += xv[(b * c + ch) * s..(b * c + ch + 1) * s]
                    .iter()
                    .copied()
                    .sum();
            }
            let mu = acc / m;
            let mut sq = T::zero();
            for b in 0..n {
                for &v in &xv[(b * c + ch) * s..(b * c + ch + 1) * s] {
                    sq += (v - mu) * (v - mu);
                }
            }
            mean[ch] = mu;
            var[ch] = sq / m;
        }
        let inv_std: Vec<T> = var
            .iter()
            .map(|&v| T::one() / (v + T::of(BN_EPS)).sqrt())
            .collect();
        let mut out = self.value(x).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let ch = (i / s) % c;
            *v = (*v - mean[ch]) * inv_std[ch];
        }
        let id = self.push(out, Op::BatchNorm { x, inv_std }, &[x]);
        self.nodes[id.0].batch_stats = Some((mean, var));
        id
    }

    /// `x * scale + shift` per channel; `scale`/`shift` are `[N, C]` or `[1, C]`.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Var {
        let (n, c, s) = ncs(self.shape(x));
        let (sn, sc, _) = ncs(self.shape(scale));
        let (hn, hc, _) = ncs(self.shape(shift));
        assert!(
            sc == c && hc == c && (sn == n || sn == 1) && (hn == n || hn == 1),
            "channel_affine: {:?} with scale {:?} shift {:?}",
            self.shape(x),
            self.shape(scale),
            self.shape(shift)
        );
        let sv = self.value(scale).data();
        let hv = self.value(shift).data();
        let mut out = self.value(x).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let b = i / (c * s);
            let ch = (i / s) % c;
            let si = if sn == 1 { ch } else { b * c + ch };
            let hi = if hn == 1 { ch } else { b * c + ch };
            *v = *v * sv[si] + hv[hi];
        }
        self.push(
            out,
            Op::ChannelAffine { x, scale, shift },
            &[x, scale, shift],
        )
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let (k, e) = (tv.shape()[0], tv.per_sample());
        let mut data = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            assert!(id < k, "embedding id {} out of range {}", id, k);
            data.extend_from_slice(&tv.data()[id * e..(id + 1) * e]);
        }
        let out = Tensor::from_vec(&[ids.len(), e], data).expect("embedding shape");
        self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Batched matrix product `op(a) @ op(b)` over the leading axis, where
    /// `op` optionally transposes the trailing two axes.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0]);
        let batch = sa[0];
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        assert_eq!(k, k2, "bmm inner dims {:?} {:?}", sa, sb);
        let mut out = Tensor::zeros(&[batch, m, n]);
        let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
        let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            let od = out.data_mut();
            for i in 0..batch {
                T::gemm(
                    m,
                    k,
                    n,
                    T::one(),
                    &av[i * m * k..(i + 1) * m * k],
                    rsa,
                    csa,
                    &bv[i * k * n..(i + 1) * k * n],
                    rsb,
                    csb,
                    T::zero(),
                    &mut od[i * m * n..(i + 1) * m * n],
                    n as isize,
                    1,
                );
            }
        }
        self.push(out, Op::Bmm { a, b, ta, tb }, &[a, b])
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let l = *self.shape(x).last().expect("non-scalar");
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(l) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        self.push(out, Op::SoftmaxRows(x), &[x])
    }

    /// `[N, C, H, W] -> [N, C]` by summing spatial positions.
    pub fn global_sum_pool(&mut self, x: Var) -> Var {
        let (n, c, s) = ncs(self.shape(x));
        let xv = self.value(x).data();
        let out = Tensor::from_fn(&[n, c], |i| xv[i * s..(i + 1) * s].iter().copied().sum());
        self.push(out, Op::GlobalSumPool(x), &[x])
    }

    /// Sum over everything but the leading axis: `[N, ..] -> [N, 1]`.
    pub fn row_sums(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, per) = (xv.batch(), xv.per_sample());
        let d = xv.data();
        let out = Tensor::from_fn(&[n, 1], |i| d[i * per..(i + 1) * per].iter().copied().sum());
        self.push(out, Op::RowSums(x), &[x])
    }

    /// Mean softmax cross-entropy of `[N, K]` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let lv = self.value(logits);
        let (n, k) = (lv.batch(), lv.per_sample());
        assert_eq!(labels.len(), n);
        let mut probs = lv.data().to_vec();
        let mut loss = T::zero();
        for (row, &y) in probs.chunks_mut(k).zip(labels) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
            loss -= row[y].max(T::min_positive_value()).ln();
        }
        let out = Tensor::scalar(loss / T::of(n as f64));
        self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// `w / sigma` with `sigma = u^T W v` for fixed singular-vector estimates
    /// `u` (length `out`) and `v` (length `in`).
    pub fn spectral_norm(&mut self, w: Var, u: &[T], v: &[T]) -> Var {
        let wv = self.value(w);
        let (rows, cols) = (wv.shape()[0], wv.per_sample());
        assert!(u.len() == rows && v.len() == cols);
        let d = wv.data();
        let mut sigma = T::zero();
        for i in 0..rows {
            let dot: T = d[i * cols..(i + 1) * cols]
                .iter()
                .zip(v)
                .map(|(&a, &b)| a * b)
                .sum();
            sigma += u[i] * dot;
        }
        let sigma = sigma.max(T::of(1e-12));
        let out = wv.map(|x| x / sigma);
        self.push(
            out,
            Op::SpectralNorm {
                w,
                u: u.to_vec(),
                v: v.to_vec(),
                sigma,
            },
            &[w],
        )
    }

    /// Reverse sweep from a scalar `loss`. Only leaf gradients are retained.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.value(loss).shape()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(i, &gy, &mut grads);
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(gy);
            }
        }
        Gradients { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, i: usize, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let put = |grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>| {
            if self.wants(v) {
                accumulate(&mut grads[v.0], g);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                put(grads, *a, gy.clone());
                put(grads, *b, gy.clone());
            }
            Op::Sub(a, b) => {
                put(grads, *a, gy.clone());
                put(grads, *b, gy.scale(-T::one()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    put(grads, *a, zip(gy, bv, |g, x| g * x));
                }
                if self.wants(*b) {
                    put(grads, *b, zip(gy, av, |g, x| g * x));
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    put(grads, *a, zip(gy, bv, |g, x| g / x));
                }
                if self.wants(*b) {
                    let t = zip(gy, av, |g, x| g * x);
                    put(grads, *b, zip(&t, bv, |gx, d| -gx / (d * d)));
                }
            }
            Op::Scale(a, c) => put(grads, *a, gy.scale(*c)),
            Op::AddScalar(a) => put(grads, *a, gy.clone()),
            Op::Relu(a) => put(
                grads,
                *a,
                zip(gy, self.value(*a), |g, x| {
                    if x > T::zero() {
                        g
                    } else {
                        T::zero()
                    }
                }),
            ),
            Op::LeakyRelu(a, slope) => {
                let s = *slope;
                put(
                    grads,
                    *a,
                    zip(
                        gy,
                        self.value(*a),
                        |g, x| if x > T::zero() { g } else { g * s },
                    ),
                )
            }
            Op::Tanh(a) => put(grads, *a, zip(gy, y, |g, t| g * (T::one() - t * t))),
            Op::Abs(a) => put(
                grads,
                *a,
                zip(gy, self.value(*a), |g, x| {
                    if x > T::zero() {
                        g
                    } else if x < T::zero() {
                        -g
                    } else {
                        T::zero()
                    }
                }),
            ),
            Op::Square(a) => put(grads, *a, zip(gy, self.value(*a), |g, x| g * (x + x))),
            Op::Sqrt(a) => put(
                grads,
                *a,
                zip(gy, y, |g, r| {
                    if r > T::zero() {
                        g / (r + r)
                    } else {
                        T::zero()
                    }
                }),
            ),
            Op::SumAll(a) => {
                let g = gy.data()[0];
                put(grads, *a, Tensor::full(self.shape(*a), g));
            }
            Op::MeanAll(a) => {
                let n = self.value(*a).len().max(1);
                let g = gy.data()[0] / T::of(n as f64);
                put(grads, *a, Tensor::full(self.shape(*a), g));
            }
            Op::MulScalarVar(x, s) => {
                let sv = self.scalar(*s);
                if self.wants(*x) {
                    put(grads, *x, gy.scale(sv));
                }
                if self.wants(*s) {
                    let d = dot(gy.data(), self.value(*x).data());
                    put(grads, *s, Tensor::scalar(d));
                }
            }
            Op::DivScalarVar(x, s) => {
                let sv = self.scalar(*s);
                if self.wants(*x) {
                    put(grads, *x, gy.map(|g| g / sv));
                }
                if self.wants(*s) {
                    let d = dot(gy.data(), self.value(*x).data());
                    put(grads, *s, Tensor::scalar(-d / (sv * sv)));
                }
            }
            Op::MulChannelBroadcast(x, m) => {
                let (n, c, s) = ncs(self.shape(*x));
                let xv = self.value(*x).data();
                let mv = self.value(*m).data();
                if self.wants(*x) {
                    let mut gx = gy.clone();
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * s;
                            for (j, g) in gx.data_mut()[base..base + s].iter_mut().enumerate() {
                                *g *= mv[b * s + j];
                            }
                        }
                    }
                    put(grads, *x, gx);
                }
                if self.wants(*m) {
                    let mut gm = Tensor::zeros(self.shape(*m));
                    let gd = gy.data();
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * s;
                            for j in 0..s {
                                gm.data_mut()[b * s + j] += gd[base + j] * xv[base + j];
                            }
                        }
                    }
                    put(grads, *m, gm);
                }
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let n = xv.batch();
                let fan_in = xv.per_sample();
                let out_dim = wv.shape()[0];
                if self.wants(*x) {
                    let mut gx = Tensor::zeros(xv.shape());
                    T::gemm(
                        n,
                        out_dim,
                        fan_in,
                        T::one(),
                        gy.data(),
                        out_dim as isize,
                        1,
                        wv.data(),
                        fan_in as isize,
                        1,
                        T::zero(),
                        gx.data_mut(),
                        fan_in as isize,
                        1,
                    );
                    put(grads, *x, gx);
                }
                if self.wants(*w) {
                    let mut gw = Tensor::zeros(wv.shape());
                    T::gemm(
                        out_dim,
                        n,
                        fan_in,
                        T::one(),
                        gy.data(),
                        1,
                        out_dim as isize,
                        xv.data(),
                        fan_in as isize,
                        1,
                        T::zero(),
                        gw.data_mut(),
                        fan_in as isize,
                        1,
                    );
                    put(grads, *w, gw);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut gb = Tensor::zeros(&[out_dim]);
                        for row in gy.data().chunks(out_dim) {
                            for (acc, &g) in gb.data_mut().iter_mut().zip(row) {
                                *acc += g;
                            }
                        }
                        put(grads, *b, gb);
                    }
                }
            }
            Op::Conv2d { x, w, b, k } => self.conv2d_backward(*x, *w, *b, *k, gy, grads),
            Op::MaxPool2 { x, argmax } => {
                let mut gx = Tensor::zeros(self.shape(*x));
                for (&idx, &g) in argmax.iter().zip(gy.data()) {
                    gx.data_mut()[idx as usize] += g;
                }
                put(grads, *x, gx);
            }
            Op::AvgPool2(x) => {
                let (n, c, h, w) = nchw(self.shape(*x));
                let (oh, ow) = (h / 2, w / 2);
                let quarter = T::of(0.25);
                let gd = gy.data();
                let gx = Tensor::from_fn(&[n, c, h, w], |i| {
                    let p = i / (h * w);
                    let yy = (i / w) % h;
                    let xx = i % w;
                    if yy / 2 >= oh || xx / 2 >= ow {
                        return T::zero();
                    }
                    gd[(p * oh + yy / 2) * ow + xx / 2] * quarter
                });
                put(grads, *x, gx);
            }
            Op::Upsample2(x) => {
                let (n, c, h, w) = nchw(self.shape(*x));
                let (oh, ow) = (2 * h, 2 * w);
                let gd = gy.data();
                let gx = Tensor::from_fn(&[n, c, h, w], |i| {
                    let p = i / (h * w);
                    let yy = (i / w) % h;
                    let xx = i % w;
                    let base = p * oh * ow + 2 * yy * ow + 2 * xx;
                    gd[base] + gd[base + 1] + gd[base + ow] + gd[base + ow + 1]
                });
                put(grads, *x, gx);
            }
            Op::ConcatChannels(a, b) => {
                let (n, ca, s) = ncs(self.shape(*a));
                let (_, cb, _) = ncs(self.shape(*b));
                let gd = gy.data();
                if self.wants(*a) {
                    let mut ga = Vec::with_capacity(n * ca * s);
                    for i in 0..n {
                        let base = i * (ca + cb) * s;
                        ga.extend_from_slice(&gd[base..base + ca * s]);
                    }
                    put(
                        grads,
                        *a,
                        Tensor::from_vec(self.shape(*a), ga).expect("concat grad"),
                    );
                }
                if self.wants(*b) {
                    let mut gb = Vec::with_capacity(n * cb * s);
                    for i in 0..n {
                        let base = i * (ca + cb) * s + ca * s;
                        gb.extend_from_slice(&gd[base..base + cb * s]);
                    }
                    put(
                        grads,
                        *b,
                        Tensor::from_vec(self.shape(*b), gb).expect("concat grad"),
                    );
                }
            }
            Op::Reshape(x) => put(
                grads,
                *x,
                gy.clone().reshape(self.shape(*x)).expect("reshape grad"),
            ),
            Op::SliceBatch { x, start } => {
                let mut gx = Tensor::zeros(self.shape(*x));
                let per = gx.per_sample();
                gx.data_mut()[start * per..start * per + gy.len()].copy_from_slice(gy.data());
                put(grads, *x, gx);
            }
            Op::BatchNorm { x, inv_std } => {
                let (n, c, s) = ncs(self.shape(*x));
                let m = T::of((n * s) as f64);
                let gd = gy.data();
                let yd = y.data();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gy = vec![T::zero(); c];
                for (i, (&g, &yy)) in gd.iter().zip(yd).enumerate() {
                    let ch = (i / s) % c;
                    sum_g[ch] += g;
                    sum_gy[ch] += g * yy;
                }
                let gx = Tensor::from_fn(self.shape(*x), |i| {
                    let ch = (i / s) % c;
                    inv_std[ch] / m * (m * gd[i] - sum_g[ch] - yd[i] * sum_gy[ch])
                });
                put(grads, *x, gx);
            }
            Op::ChannelAffine { x, scale, shift } => {
                let (_, c, s) = ncs(self.shape(*x));
                let sn = self.shape(*scale)[0];
                let hn = self.shape(*shift)[0];
                let xv = self.value(*x).data();
                let sv = self.value(*scale).data();
                let gd = gy.data();
                if self.wants(*x) {
                    let gx = Tensor::from_fn(self.shape(*x), |i| {
                        let b = i / (c * s);
                        let ch = (i / s) % c;
                        let si = if sn == 1 { ch } else { b * c + ch };
                        gd[i] * sv[si]
                    });
                    put(grads, *x, gx);
                }
                if self.wants(*scale) {
                    let mut gs = Tensor::zeros(self.shape(*scale));
                    for (i, (&g, &xx)) in gd.iter().zip(xv).enumerate() {
                        let b = i / (c * s);
                        let ch = (i / s) % c;
                        let si = if sn == 1 { ch } else { b * c + ch };
                        gs.data_mut()[si] += g * xx;
                    }
                    put(grads, *scale, gs);
                }
                if self.wants(*shift) {
                    let mut gh = Tensor::zeros(self.shape(*shift));
                    for (i, &g) in gd.iter().enumerate() {
                        let b = i / (c * s);
                        let ch = (i / s) % c;
                        let hi = if hn == 1 { ch } else { b * c + ch };
                        gh.data_mut()[hi] += g;
                    }
                    put(grads, *shift, gh);
                }
            }
            Op::Embedding { table, ids } => {
                let mut gt = Tensor::zeros(self.shape(*table));
                let e = gt.per_sample();
                for (row, &id) in gy.data().chunks(e).zip(ids) {
                    for (acc, &g) in gt.data_mut()[id * e..(id + 1) * e].iter_mut().zip(row) {
                        *acc += g;
                    }
                }
                put(grads, *table, gt);
            }
            Op::Bmm { a, b, ta, tb } => self.bmm_backward(*a, *b, *ta, *tb, gy, grads),
            Op::SoftmaxRows(x) => {
                let l = *y.shape().last().expect("non-scalar");
                let mut gx = gy.clone();
                for (grow, yrow) in gx.data_mut().chunks_mut(l).zip(y.data().chunks(l)) {
                    let d = dot(grow, yrow);
                    for (g, &p) in grow.iter_mut().zip(yrow) {
                        *g = p * (*g - d);
                    }
                }
                put(grads, *x, gx);
            }
            Op::GlobalSumPool(x) => {
                let (_, _, s) = ncs(self.shape(*x));
                let gd = gy.data();
                let gx = Tensor::from_fn(self.shape(*x), |i| gd[i / s]);
                put(grads, *x, gx);
            }
            Op::RowSums(x) => {
                let per = self.value(*x).per_sample();
                let gd = gy.data();
                let gx = Tensor::from_fn(self.shape(*x), |i| gd[i / per]);
                put(grads, *x, gx);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = self.value(*logits).per_sample();
                let n = labels.len();
                let g = gy.data()[0] / T::of(n as f64);
                let mut gl =
                    Tensor::from_vec(self.shape(*logits), probs.clone()).expect("logit shape");
                for (row, &lab) in gl.data_mut().chunks_mut(k).zip(labels) {
                    row[lab] -= T::one();
                    for v in row.iter_mut() {
                        *v *= g;
                    }
                }
                put(grads, *logits, gl);
            }
            Op::SpectralNorm { w, u, v, sigma } => {
                let wv = self.value(*w);
                let cols = wv.per_sample();
                let inner = dot(gy.data(), wv.data()) / (*sigma * *sigma);
                let gw = Tensor::from_fn(wv.shape(), |i| {
                    gy.data()[i] / *sigma - inner * u[i / cols] * v[i % cols]
                });
                put(grads, *w, gw);
            }
        }
    }

    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        k: usize,
        gy: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (n, c, h, wd) = nchw(self.shape(x));
        let o = self.shape(w)[0];
        let hw = h * wd;
        let ckk = c * k * k;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let gd = gy.data();
        let want_x = self.wants(x);
        let want_w = self.wants(w);
        let mut gx = want_x.then(|| Tensor::zeros(self.shape(x)));
        let mut gw = want_w.then(|| Tensor::zeros(self.shape(w)));
        let mut cols = if k == 1 {
            Vec::new()
        } else {
            vec![T::zero(); ckk * hw]
        };
        let mut dcols = if k == 1 || !want_x {
            Vec::new()
        } else {
            vec![T::zero(); ckk * hw]
        };
        for bi in 0..n {
            let gyb = &gd[bi * o * hw..(bi + 1) * o * hw];
            let xs = &xv[bi * c * hw..(bi + 1) * c * hw];
            if let Some(gw) = gw.as_mut() {
                let src: &[T] = if k == 1 {
                    xs
                } else {
                    im2col(xs, c, h, wd, k, &mut cols);
                    &cols
                };
                T::gemm(
                    o,
                    hw,
                    ckk,
                    T::one(),
                    gyb,
                    hw as isize,
                    1,
                    src,
                    1,
                    hw as isize,
                    T::one(),
                    gw.data_mut(),
                    ckk as isize,
                    1,
                );
            }
            if let Some(gx) = gx.as_mut() {
                let gxb = &mut gx.data_mut()[bi * c * hw..(bi + 1) * c * hw];
                if k == 1 {
                    T::gemm(
                        ckk,
                        o,
                        hw,
                        T::one(),
                        wv,
                        1,
                        ckk as isize,
                        gyb,
                        hw as isize,
                        1,
                        T::one(),
                        gxb,
                        hw as isize,
                        1,
                    );
                } else {
                    T::gemm(
                        ckk,
                        o,
                        hw,
                        T::one(),
                        wv,
                        1,
                        ckk as isize,
                        gyb,
                        hw as isize,
                        1,
                        T::zero(),
                        &mut dcols,
                        hw as isize,
                        1,
                    );
                    col2im_add(&dcols, c, h, wd, k, gxb);
                }
            }
        }
        if let Some(gx) = gx {
            accumulate(&mut grads[x.0], gx);
        }
        if let Some(gw) = gw {
            accumulate(&mut grads[w.0], gw);
        }
        if let Some(b) = b {
            if self.wants(b) {
                let mut gb = Tensor::zeros(&[o]);
                for (idx, plane) in gd.chunks(hw).enumerate() {
                    gb.data_mut()[idx % o] += plane.iter().copied().sum();
                }
                accumulate(&mut grads[b.0], gb);
            }
        }
    }

    fn bmm_backward(
        &self,
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        gy: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let batch = sa[0];
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let n = if tb { sb[1] } else { sb[2] };
        let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
        let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let gd = gy.data();
        if self.wants(a) {
            // d op(a) = gy @ op(b)^T, written back in a's storage layout.
            let mut ga = Tensor::zeros(sa);
            let (rsc, csc) = if ta { (1, m as isize) } else { (k as isize, 1) };
            for i in 0..batch {
                T::gemm(
                    m,
                    n,
                    k,
                    T::one(),
                    &gd[i * m * n..(i + 1) * m * n],
                    n as isize,
                    1,
                    &bv[i * k * n..(i + 1) * k * n],
                    csb,
                    rsb,
                    T::zero(),
                    &mut ga.data_mut()[i * m * k..(i + 1) * m * k],
                    rsc,
                    csc,
                );
            }
            accumulate(&mut grads[a.0], ga);
        }
        if self.wants(b) {
            // d op(b) = op(a)^T @ gy
            let mut gb = Tensor::zeros(sb);
            let (rsc, csc) = if tb { (1, k as isize) } else { (n as isize, 1) };
            for i in 0..batch {
                T::gemm(
                    k,
                    m,
                    n,
                    T::one(),
                    &av[i * m * k..(i + 1) * m * k],
                    csa,
                    rsa,
                    &gd[i * m * n..(i + 1) * m * n],
                    n as isize,
                    1,
                    T::zero(),
                    &mut gb.data_mut()[i * k * n..(i + 1) * k * n],
                    rsc,
                    csc,
                );
            }
            accumulate(&mut grads[b.0], gb);
        }
    }
}

fn zip<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_vec(a.shape(), data).expect("same shape")
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}
