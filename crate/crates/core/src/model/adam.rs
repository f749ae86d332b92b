use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::model::{ParamGroup, ParamStore};

/// Base learning rate per parameter group; zero freezes the group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearningRates(pub BTreeMap<ParamGroup, f64>);

impl LearningRates {
    pub fn get(&self, g: ParamGroup) -> f64 {
        self.0.get(&g).copied().unwrap_or(0.0)
    }

    pub fn set(&mut self, g: ParamGroup, lr: f64) {
        self.0.insert(g, lr);
    }

    pub fn is_trainable(&self, g: ParamGroup) -> bool {
        self.get(g) > 0.0
    }
}

impl Default for LearningRates {
    fn default() -> Self {
        Self(BTreeMap::from([
            (ParamGroup::BackboneHead, 0.0),
            (ParamGroup::BackboneTail, 5e-5),
            (ParamGroup::Classifier, 5e-5),
            (ParamGroup::BoxRegressor, 5e-4),
            (ParamGroup::Discriminator, 5e-4),
        ]))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: LearningRates,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Multiplier applied every `decay_every` epochs.
    pub decay_factor: f64,
    pub decay_every: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: LearningRates::default(),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_factor: 0.2,
            decay_every: 15,
        }
    }
}

impl AdamConfig {
    /// Step-decayed learning rate of `group` during `epoch` (zero-based).
    pub fn lr_at(&self, group: ParamGroup, epoch: usize) -> f64 {
        let k = if self.decay_every == 0 {
            0
        } else {
            epoch / self.decay_every
        };
        self.lr.get(group) * self.decay_factor.powi(k as i32)
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = |p: &crate::model::Param| Tensor::zeros(p.value.raw_dim());
        Self {
            config,
            t: 0,
            m: store.params().iter().map(zeros).collect(),
            v: store.params().iter().map(zeros).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update of every trainable parameter that received a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], epoch: usize) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::Shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        for (p, g) in store.params().iter().zip(grads) {
            if let Some(g) = g {
                if !g.iter().all(|x| x.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of `{}`", p.name)));
                }
            }
        }
        self.t += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (i, (p, g)) in store.params_mut().iter_mut().zip(grads).enumerate() {
            let lr = c.lr_at(p.group, epoch);
            let Some(g) = g else { continue };
            if lr <= 0.0 {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            ndarray::Zip::from(&mut p.value)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|w, m, v, &g| {
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    *w -= lr * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
                });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, ArrayD};

    #[test]
    fn decay_schedule() {
        let c = AdamConfig::default();
        let g = ParamGroup::Classifier;
        assert_eq!(c.lr_at(g, 0), 5e-5);
        assert_eq!(c.lr_at(g, 14), 5e-5);
        assert!((c.lr_at(g, 15) - 0.2 * 5e-5).abs() < 1e-20);
        assert!((c.lr_at(g, 30) - 0.04 * 5e-5).abs() < 1e-20);
        assert_eq!(c.lr_at(ParamGroup::BoxRegressor, 0), 5e-4);
        assert_eq!(c.lr_at(ParamGroup::BackboneHead, 0), 0.0);
    }

    #[test]
    fn minimizes_quadratic_and_respects_frozen() {
        let mut store = ParamStore::new();
        store.push("a", ParamGroup::BoxRegressor, arr1(&[3.0, -2.0]).into_dyn());
        store.push("b", ParamGroup::BackboneHead, arr1(&[1.0]).into_dyn());
        let mut cfg = AdamConfig::default();
        cfg.lr.set(ParamGroup::BoxRegressor, 0.1);
        let mut opt = Adam::new(&store, cfg);
        for _ in 0..500 {
            let a = store.params()[0].value.clone();
            let ga: ArrayD<f64> = a.mapv(|x| 2.0 * x);
            opt.step(&mut store, &[Some(ga), Some(arr1(&[1.0]).into_dyn())], 0)
                .unwrap();
        }
        assert!(store.params()[0].value.iter().all(|x| x.abs() < 1e-2));
        assert_eq!(store.params()[1].value[[0]], 1.0);
        let bad = arr1(&[f64::NAN, 0.0]).into_dyn();
        assert!(opt.step(&mut store, &[Some(bad), None], 0).is_err());
    }
}
