//! AdamW with decoupled weight decay, and learning-rate schedules.

use std::f64::consts::PI;

use crate::error::{shape_err, Result};
use crate::nn::{Gradients, ParamId, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub weight_decay: T,
    step: u64,
    m: Vec<Option<Vec<T>>>,
    v: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: T::from_f64_lossy(0.9),
            beta2: T::from_f64_lossy(0.999),
            eps: T::from_f64_lossy(1e-8),
            weight_decay: T::from_f64_lossy(weight_decay),
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, id: ParamId) -> Option<(&[T], &[T])> {
        let i = id.index();
        match (self.m.get(i)?, self.v.get(i)?) {
            (Some(m), Some(v)) => Some((m, v)),
            _ => None,
        }
    }

    /// Restores saved state (checkpoint resume).
    pub fn restore(&mut self, step: u64, moments: Vec<Option<(Vec<T>, Vec<T>)>>) {
        self.step = step;
        let (m, v) = moments
            .into_iter()
            .map(|mv| match mv {
                Some((m, v)) => (Some(m), Some(v)),
                None => (None, None),
            })
            .unzip();
        self.m = m;
        self.v = v;
    }

    /// One update of every trainable parameter. A trainable parameter with no
    /// gradient is treated as having a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, lr: T) -> Result<()> {
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        let decay = T::one() - lr * self.weight_decay;
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let p = store.get_mut(id);
            if !p.requires_grad() {
                continue;
            }
            let n = p.numel();
            let g = grads.get(id);
            if let Some(g) = g {
                if g.len() != n {
                    return Err(shape_err("adamw", p.shape(), &[g.len()]));
                }
            }
            let m = self.m[id.index()].get_or_insert_with(|| vec![T::zero(); n]);
            let v = self.v[id.index()].get_or_insert_with(|| vec![T::zero(); n]);
            for (k, w) in p.data_mut().iter_mut().enumerate() {
                let gk = g.map_or(T::zero(), |g| g[k]);
                m[k] = self.beta1 * m[k] + (T::one() - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (T::one() - self.beta2) * gk * gk;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                *w = *w * decay - lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup then cosine decay from `base` to `min`.
pub fn cosine_lr(step: usize, total: usize, base: f64, min: f64, warmup: usize) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    min + 0.5 * (base - min) * (1.0 + (PI * progress).cos())
}
