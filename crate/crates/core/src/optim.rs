//! Adam over the trainable entries of a [`ParamStore`].

use std::collections::BTreeMap;

use crate::autodiff::Gradients;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Float;

#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<ParamId, (Vec<T>, Vec<T>)>,
}

impl<T: Float> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Bytes held by the two moment buffers for `store`'s trainable params.
    pub fn state_bytes(store: &ParamStore<T>) -> u64 {
        store
            .ids()
            .filter(|&id| store.trainable(id))
            .map(|id| 2 * store.meta(id).numel() as u64 * std::mem::size_of::<T>() as u64)
            .sum()
    }

    /// One update. Frozen parameters are never touched, even if a gradient
    /// for them is present.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        self.step += 1;
        let t = self.step as f64;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powf(t);
        let c2 = 1.0 - b2.powf(t);
        for (id, g) in grads.params() {
            if !store.trainable(id) {
                continue;
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", store.meta(id).name)));
            }
            let w = store.dense_mut(id)?;
            let n = w.len();
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
            let (b1t, b2t) = (T::of(b1), T::of(b2));
            let (one, lr, eps) = (T::one(), T::of(self.lr), T::of(self.eps));
            let (c1, c2) = (T::of(c1), T::of(c2));
            for (((wi, &gi), mi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1t * *mi + (one - b1t) * gi;
                *vi = b2t * *vi + (one - b2t) * gi * gi;
                let mh = *mi / c1;
                let vh = *vi / c2;
                *wi -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::params::{Component, Init, ParamMeta, Role};
    use rand::SeedableRng;

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::<f64>::new();
        let meta = ParamMeta {
            name: "w".into(),
            shape: vec![3],
            role: Role::Weight,
            attention: false,
            component: Component::MaskDecoder,
            region: "decoder".into(),
            trainable: true,
        };
        let id = s.add(meta, Init::Uniform(1.0), &mut rng).unwrap();
        let before = s.dense(id).unwrap().data().to_vec();
        let mut t = Tape::new();
        let w = t.param(&s, id).unwrap();
        let sq = t.mul(w, w).unwrap();
        let l = t.sum(sq).unwrap();
        let g = t.backward(l).unwrap();
        let mut opt = Adam::new(0.1);
        opt.step(&mut s, &g).unwrap();
        for (a, b) in s.dense(id).unwrap().data().iter().zip(&before) {
            assert!((a - (b - 0.1 * b.signum())).abs() < 1e-6);
        }
    }
}
