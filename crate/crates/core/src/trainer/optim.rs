//! Decoupled-weight-decay Adam with per-group learning-rate multipliers.

use alloc::vec;
use alloc::vec::Vec;

use super::OptimConfig;
use crate::model::{Grads, ParamGroup, ParamStore};
use crate::real::Real;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdamW<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    /// Steps taken so far.
    pub t: u64,
}

impl<T: Real> AdamW<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let mut a = AdamW {
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        };
        a.sync(params);
        a
    }

    /// Adds zeroed moments for tensors created after the optimizer.
    pub fn sync(&mut self, params: &ParamStore<T>) {
        for i in self.m.len()..params.len() {
            let n = params.data[i].len();
            self.m.push(vec![T::zero(); n]);
            self.v.push(vec![T::zero(); n]);
        }
    }

    /// Drops moments of tensors that are not in `keep`, mirroring
    /// [`crate::model::PolicyModel::remove_params`].
    pub fn retain(&mut self, keep: &[bool]) {
        let mut i = 0;
        self.m.retain(|_| {
            i += 1;
            keep[i - 1]
        });
        let mut i = 0;
        self.v.retain(|_| {
            i += 1;
            keep[i - 1]
        });
    }

    /// One update. Tensors with an inactive gradient slot are left
    /// untouched, moments included. `lr_factor` scales every group (used
    /// for warm-up).
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Grads<T>, cfg: &OptimConfig, lr_factor: f64) {
        self.sync(params);
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let bc1 = 1.0 - libm::pow(b1, self.t as f64);
        let bc2 = 1.0 - libm::pow(b2, self.t as f64);
        let (tb1, tb2, eps) = (T::of(b1), T::of(b2), T::of(cfg.eps));
        for id in 0..params.len() {
            if !grads.active[id] {
                continue;
            }
            let info = &params.infos[id];
            let lr = cfg.base_lr * lr_factor * cfg.multiplier(info.group);
            let step = T::of(lr / bc1);
            let inv_bc2 = T::of(1.0 / bc2);
            let decay = if info.decay { T::of(lr * cfg.weight_decay) } else { T::zero() };
            let g = &grads.data[id];
            let m = &mut self.m[id];
            let v = &mut self.v[id];
            for (((p, gi), mi), vi) in params.data[id].iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = tb1 * *mi + (T::one() - tb1) * *gi;
                *vi = tb2 * *vi + (T::one() - tb2) * *gi * *gi;
                let denom = (*vi * inv_bc2).sqrt() + eps;
                *p -= decay * *p + step * *mi / denom;
            }
        }
    }
}

impl OptimConfig {
    pub fn multiplier(&self, g: ParamGroup) -> f64 {
        match g {
            ParamGroup::Prompt => self.lr_prompt,
            ParamGroup::Encoder => self.lr_encoder,
            ParamGroup::Rest => self.lr_rest,
        }
    }
}

/// Scales gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut Grads<T>, max_norm: f64) -> f64 {
    let n = grads.global_norm();
    if max_norm > 0.0 && n > max_norm {
        grads.scale(T::of(max_norm / n));
    }
    n
}
