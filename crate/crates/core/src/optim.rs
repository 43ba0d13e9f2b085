//! Adaptive-moment optimizer with decoupled weight decay, and gradient clipping.

use std::collections::BTreeMap;

use autograd::Array;
use serde::{Deserialize, Serialize};

use crate::nn::ParamStore;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::config(format!("optimizer.{name}"), "must lie in (0, 1)"));
            }
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("optimizer", "eps must be > 0 and weight_decay ≥ 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Array,
    v: Array,
    t: i32,
}

/// AdamW. Parameters without a gradient in a step are left untouched,
/// including their decay and moment state.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamConfig,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, state: BTreeMap::new() }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Array>, lr: f64) -> Result<()> {
        let c = &self.config;
        for (name, g) in grads {
            let p = store.get_mut(name).ok_or_else(|| Error::Shape(format!("gradient for unknown parameter `{name}`")))?;
            if !p.trainable {
                continue;
            }
            if g.shape() != p.value.shape() {
                return Err(Error::Shape(format!("`{name}`: grad {:?} vs param {:?}", g.shape(), p.value.shape())));
            }
            let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: Array::zeros(g.raw_dim()),
                v: Array::zeros(g.raw_dim()),
                t: 0,
            });
            st.t += 1;
            let bc1 = 1.0 - c.beta1.powi(st.t);
            let bc2 = 1.0 - c.beta2.powi(st.t);
            let decay = 1.0 - lr * c.weight_decay;
            ndarray::Zip::from(&mut p.value).and(&mut st.m).and(&mut st.v).and(g).for_each(|w, m, v, &gi| {
                *w *= decay;
                *m = c.beta1 * *m + (1.0 - c.beta1) * gi;
                *v = c.beta2 * *v + (1.0 - c.beta2) * gi * gi;
                *w -= lr * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
            });
        }
        Ok(())
    }
}

/// Global L2 norm of a gradient set.
pub fn grad_norm(grads: &BTreeMap<String, Array>) -> f64 {
    grads.values().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Array>, max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.mapv_inplace(|x| x * s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(v: f64) -> (ParamStore, BTreeMap<String, Array>) {
        let mut s = ParamStore::new();
        s.insert("w", Array::from_elem(vec![2], v));
        s.insert("idle", Array::from_elem(vec![1], 4.0));
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Array::from_elem(vec![2], 0.5));
        (s, g)
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let (mut s, g) = setup(3.0);
        let mut opt = AdamW::new(AdamConfig { weight_decay: 0.1, ..Default::default() });
        opt.step(&mut s, &g, 0.0).unwrap();
        assert_eq!(s.value("w")[[0]], 3.0);
    }

    #[test]
    fn first_step_moves_by_lr_and_decays() {
        let (mut s, g) = setup(3.0);
        let mut opt = AdamW::new(AdamConfig { weight_decay: 0.1, eps: 0.0, ..Default::default() });
        opt.step(&mut s, &g, 0.01).unwrap();
        let expect = 3.0 * (1.0 - 0.01 * 0.1) - 0.01;
        assert!((s.value("w")[[0]] - expect).abs() < 1e-12);
        assert_eq!(s.value("idle")[[0]], 4.0);
    }

    #[test]
    fn frozen_params_skip() {
        let (mut s, g) = setup(3.0);
        s.set_trainable("w", false);
        AdamW::new(AdamConfig::default()).step(&mut s, &g, 0.1).unwrap();
        assert_eq!(s.value("w")[[1]], 3.0);
    }

    #[test]
    fn clipping() {
        let mut g = BTreeMap::new();
        g.insert("a".to_string(), Array::from_elem(vec![4], 3.0));
        let before = clip_grad_norm(&mut g, 1.5);
        assert!((before - 6.0).abs() < 1e-12);
        assert!((grad_norm(&g) - 1.5).abs() < 1e-12);
        assert!((clip_grad_norm(&mut g, 10.0) - 1.5).abs() < 1e-12);
    }
}
