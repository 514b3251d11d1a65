//! AdamW with decoupled weight decay, and global-norm gradient clipping.

use alloc::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::params::ParamKey;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// Moments of one parameter. `step` counts the updates this parameter has
/// received, so parameters that start training late get their own bias
/// correction.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamSlot {
    pub m: Tensor,
    pub v: Tensor,
    pub step: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamW {
    slots: BTreeMap<ParamKey, AdamSlot>,
}

impl AdamW {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn slots(&self) -> &BTreeMap<ParamKey, AdamSlot> {
        &self.slots
    }

    pub fn insert_slot(&mut self, key: ParamKey, slot: AdamSlot) {
        self.slots.insert(key, slot);
    }

    /// One in-place update:
    /// `θ ← θ − lr·wd·θ`, then `θ ← θ − lr·m̂ / (√v̂ + ε)`.
    pub fn update(&mut self, cfg: &AdamWConfig, key: &ParamKey, param: &mut Tensor, grad: &Tensor) {
        assert_eq!(param.shape(), grad.shape(), "AdamW: shape of `{key}`");
        let slot = self.slots.entry(key.clone()).or_insert_with(|| AdamSlot {
            m: Tensor::zeros(param.shape()),
            v: Tensor::zeros(param.shape()),
            step: 0,
        });
        slot.step += 1;
        let t = slot.step as f64;
        let bc1 = 1.0 - libm::pow(cfg.beta1, t);
        let bc2 = 1.0 - libm::pow(cfg.beta2, t);
        let decay = 1.0 - cfg.lr * cfg.weight_decay;
        let m = slot.m.data_mut();
        let v = slot.v.data_mut();
        for (i, (p, g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            *p *= decay;
            *p -= cfg.lr * m_hat / (libm::sqrt(v_hat) + cfg.eps);
        }
    }
}

pub fn global_norm<'a>(grads: impl IntoIterator<Item = &'a Tensor>) -> f64 {
    libm::sqrt(grads.into_iter().map(Tensor::sum_sq).sum())
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<ParamKey, Tensor>, max_norm: f64) -> f64 {
    let norm = global_norm(grads.values());
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.values_mut() {
            g.scale_in_place(scale);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamGroup;

    #[test]
    fn clip_to_unit() {
        let mut g = BTreeMap::new();
        g.insert(ParamKey::new(ParamGroup::GeneratorAdapters, "a"), Tensor::new(&[2], alloc::vec![6.0, 8.0]));
        let n = clip_grad_norm(&mut g, 1.0);
        assert_eq!(n, 10.0);
        assert!((global_norm(g.values()) - 1.0).abs() < 1e-12);
        let n2 = clip_grad_norm(&mut g, 5.0);
        assert!((n2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn late_parameters_get_own_bias_correction() {
        let cfg = AdamWConfig { weight_decay: 0.0, lr: 0.1, ..Default::default() };
        let mut opt = AdamW::new();
        let k1 = ParamKey::new(ParamGroup::SourceAdapters, "x");
        let k2 = ParamKey::new(ParamGroup::TargetAdapters, "y");
        let mut p1 = Tensor::scalar(0.0);
        for _ in 0..5 {
            opt.update(&cfg, &k1, &mut p1, &Tensor::scalar(1.0));
        }
        let mut p2 = Tensor::scalar(0.0);
        opt.update(&cfg, &k2, &mut p2, &Tensor::scalar(1.0));
        // first bias-corrected step moves by lr·g/|g|
        assert!((p2.item() + 0.1).abs() < 1e-6);
    }
}
