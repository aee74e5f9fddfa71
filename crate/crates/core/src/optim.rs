use alloc::collections::BTreeMap;
use alloc::string::String;

use crate::error::{Error, Result};
use crate::params::{ArrayKind, Params};
use crate::real::Real;
use crate::tensor::Tensor;

/// Adam with bias correction. Moments are keyed by parameter name so they can
/// be checkpointed alongside the arrays they track.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub step: u64,
    pub first: BTreeMap<String, Tensor<T>>,
    pub second: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: T, beta1: T, beta2: T) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: T::of(1e-8),
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn update(
        &mut self,
        params: &mut Params<T>,
        grads: &BTreeMap<String, Tensor<T>>,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = T::one() - self.beta1.powi(t);
        let c2 = T::one() - self.beta2.powi(t);
        for (name, g) in grads {
            match params.entry(name) {
                Some(e) if e.kind == ArrayKind::Weight => {}
                Some(_) => continue,
                None => return Err(Error::MissingArray(name.clone())),
            }
            let p = params.get_mut(name)?;
            if p.shape() != g.shape() {
                return Err(Error::Shape(alloc::format!(
                    "gradient for `{}` has shape {:?}, parameter {:?}",
                    name,
                    g.shape(),
                    p.shape()
                )));
            }
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
