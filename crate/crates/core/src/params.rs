//! Named parameter arrays and graph binding.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArrayKind {
    /// Updated by the optimizer.
    Weight,
    /// Updated by forward passes in training mode (running statistics,
    /// power-iteration vectors); never receives gradients.
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry<T> {
    pub kind: ArrayKind,
    pub tensor: Tensor<T>,
}

/// Ordered map from array name to tensor. Names are `/`-separated paths whose
/// first component is the owning network (`classifier/`, `generator/`, ...).
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Params<T> {
    entries: BTreeMap<String, Entry<T>>,
}

impl<T: Real> Params<T> {
    pub fn new() -> Self {
        Params {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, kind: ArrayKind, tensor: Tensor<T>) {
        self.entries.insert(name.into(), Entry { kind, tensor });
    }

    pub fn weight(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.insert(name, ArrayKind::Weight, tensor);
    }

    pub fn buffer(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.insert(name, ArrayKind::Buffer, tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|e| &e.tensor)
            .ok_or_else(|| Error::MissingArray(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.tensor)
            .ok_or_else(|| Error::MissingArray(name.to_string()))
    }

    pub fn entry(&self, name: &str) -> Option<&Entry<T>> {
        self.entries.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Entry<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|e| e.tensor.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|e| e.tensor.is_finite())
    }

    /// First non-finite array, if any.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.entries
            .iter()
            .find(|(_, e)| !e.tensor.is_finite())
            .map(|(k, _)| k.as_str())
    }

    /// Check that `self` has exactly the arrays (names and shapes) of
    /// `reference`, reporting the first offending array.
    pub fn check_layout(&self, reference: &Params<T>) -> Result<()> {
        for (name, e) in &reference.entries {
            match self.entries.get(name) {
                None => return Err(Error::MissingArray(name.clone())),
                Some(mine) if mine.tensor.shape() != e.tensor.shape() => {
                    return Err(Error::Shape(format!(
                        "array `{}` has shape {:?}, expected {:?}",
                        name,
                        mine.tensor.shape(),
                        e.tensor.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = self
            .entries
            .keys()
            .find(|k| !reference.entries.contains_key(*k))
        {
            return Err(Error::Shape(format!("unexpected array `{}`", extra)));
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and the exact bit patterns of all values.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, e) in &self.entries {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((e.tensor.rank() as u64).to_le_bytes());
            for &d in e.tensor.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in e.tensor.data() {
                h.update(v.as_f64().to_bits().to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

/// How a forward pass treats normalization layers and parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics and power-iteration buffers are
    /// recorded for a later [`Binder::commit_buffers`].
    Train,
    /// Stored running statistics; the forward pass is a pure function.
    Eval,
}

/// Binds named arrays into a [`Graph`] for one forward pass, remembering the
/// leaf each name became so gradients can be collected afterwards.
pub struct Binder<'p, T> {
    pub params: &'p Params<T>,
    pub mode: Mode,
    trainable: bool,
    vars: BTreeMap<String, Var>,
    buffer_updates: Vec<(String, Tensor<T>)>,
}

impl<'p, T: Real> Binder<'p, T> {
    /// Weights become gradient-carrying leaves.
    pub fn trainable(params: &'p Params<T>, mode: Mode) -> Self {
        Binder {
            params,
            mode,
            trainable: true,
            vars: BTreeMap::new(),
            buffer_updates: Vec::new(),
        }
    }

    /// Weights become constants; gradients may still flow through them to
    /// other inputs.
    pub fn frozen(params: &'p Params<T>, mode: Mode) -> Self {
        Binder {
            params,
            mode,
            trainable: false,
            vars: BTreeMap::new(),
            buffer_updates: Vec::new(),
        }
    }

    pub fn is_training(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn var(&mut self, g: &mut Graph<T>, name: &str) -> Result<Var> {
        if let Some(v) = self.vars.get(name) {
            return Ok(*v);
        }
        let entry = self
            .params
            .entry(name)
            .ok_or_else(|| Error::MissingArray(name.to_string()))?;
        let requires_grad = self.trainable && entry.kind == ArrayKind::Weight;
        let v = g.leaf(entry.tensor.clone(), requires_grad);
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn tensor(&self, name: &str) -> Result<&'p Tensor<T>> {
        self.params.get(name)
    }

    pub fn record_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) {
        if self.mode == Mode::Train {
            self.buffer_updates.push((name.into(), value));
        }
    }

    pub fn buffer_updates(&self) -> &[(String, Tensor<T>)] {
        &self.buffer_updates
    }

    /// Gradients of every bound weight, keyed by name.
    pub fn gradients(&self, grads: &mut Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        let mut out = BTreeMap::new();
        for (name, &v) in &self.vars {
            if let Some(g) = grads.take(v) {
                out.insert(name.clone(), g);
            }
        }
        out
    }

    /// Write recorded buffer values (running statistics, singular vectors)
    /// into `target`.
    pub fn commit_buffers(self, target: &mut Params<T>) -> Result<()> {
        for (name, value) in self.buffer_updates {
            *target.get_mut(&name)? = value;
        }
        Ok(())
    }

    pub fn take_buffer_updates(self) -> Vec<(String, Tensor<T>)> {
        self.buffer_updates
    }
}

pub fn apply_buffer_updates<T: Real>(
    target: &mut Params<T>,
    updates: Vec<(String, Tensor<T>)>,
) -> Result<()> {
    for (name, value) in updates {
        *target.get_mut(&name)? = value;
    }
    Ok(())
}

/// Lowercase hex rendering of a digest.
pub fn hex_digest(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{:02x}", b));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_tracks_bit_changes() {
        let mut p = Params::<f32>::new();
        p.weight("a/w", Tensor::ones(&[2, 2]));
        let d0 = p.digest();
        assert_eq!(d0, p.clone().digest());
        p.get_mut("a/w").unwrap().data_mut()[3] = f32::from_bits(1.0f32.to_bits() + 1);
        assert_ne!(d0, p.digest());
    }

    #[test]
    fn layout_check_names_first_offender() {
        let mut a = Params::<f32>::new();
        a.weight("x/a", Tensor::zeros(&[2]));
        a.weight("x/b", Tensor::zeros(&[3]));
        let mut b = a.clone();
        *b.get_mut("x/b").unwrap() = Tensor::zeros(&[4]);
        let err = b.check_layout(&a).unwrap_err();
        assert!(matches!(err, Error::Shape(ref m) if m.contains("x/b")));
    }
}
