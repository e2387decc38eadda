//! Adam with two parameter groups and a step-decay schedule.

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamGrads;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// `base × factor^⌊epoch / every⌋`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepDecay {
    pub base_lr: f64,
    pub factor: f64,
    pub every_epochs: usize,
}

impl StepDecay {
    pub fn lr(&self, epoch: usize) -> f64 {
        let k = if self.every_epochs == 0 { 0 } else { epoch / self.every_epochs };
        self.base_lr * self.factor.powi(k as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) || !(self.factor > 0.0) {
            return Err(Error::Config("learning rate and decay factor must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moments for every parameter, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| Tensor::zeros(t.rows(), t.cols())).collect();
        Self { config, step: 0, m: zeros(), v: zeros() }
    }

    /// Moments for parameters registered after construction (e.g. a new head).
    pub fn sync(&mut self, store: &ParamStore) {
        for (id, _, t) in store.iter().skip(self.m.len()) {
            debug_assert_eq!(id.0, self.m.len());
            self.m.push(Tensor::zeros(t.rows(), t.cols()));
            self.v.push(Tensor::zeros(t.rows(), t.cols()));
        }
    }

    /// One update; `lr_of(name)` gives each parameter's learning rate.
    /// Parameters without a gradient are left untouched.
    pub fn update(&mut self, store: &mut ParamStore, grads: &ParamGrads, lr_of: impl Fn(&str) -> f64) {
        self.sync(store);
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let lr = lr_of(store.name(id));
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            let p = store.get_mut(id);
            for (((p, m), v), &g) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    #[test]
    fn schedule_table() {
        let s = StepDecay { base_lr: 5e-5, factor: 0.5, every_epochs: 60 };
        for (e, want) in [(0, 5e-5), (59, 5e-5), (60, 2.5e-5), (119, 2.5e-5), (120, 1.25e-5), (199, 6.25e-6)] {
            assert!((s.lr(e) - want).abs() < 1e-18, "epoch {e}");
        }
        let p = StepDecay { base_lr: 5e-5, factor: 0.5, every_epochs: 100 };
        assert_eq!(p.lr(99), 5e-5);
        assert_eq!(p.lr(100), 2.5e-5);
        assert_eq!(p.lr(299), 1.25e-5);
    }

    #[test]
    fn converges_on_a_quadratic() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(5.0));
        let mut adam = Adam::new(&store, AdamConfig::default());
        for _ in 0..2000 {
            let mut t = Tape::new(&store);
            let xv = t.param(x);
            let c = t.constant(Tensor::scalar(3.0));
            let d = t.sub(xv, c);
            let sq = t.mul(d, d);
            let grads = t.backward(sq).into_param_grads(&store);
            // decay inside the run so the iterate settles instead of orbiting
            let step = adam.step;
            adam.update(&mut store, &grads, |_| 0.1 * 0.5f64.powi((step / 200) as i32));
        }
        assert!((store.get(x).item() - 3.0).abs() < 1e-6, "{}", store.get(x).item());
    }

    #[test]
    fn untouched_parameters_stay_put() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::scalar(1.0));
        let b = store.add("b", Tensor::scalar(1.0));
        let mut adam = Adam::new(&store, AdamConfig::default());
        let mut t = Tape::new(&store);
        let av = t.param(a);
        let grads = t.backward(av).into_param_grads(&store);
        adam.update(&mut store, &grads, |_| 0.01);
        assert!((store.get(a).item() - 0.99).abs() < 1e-9);
        assert_eq!(store.get(b).item(), 1.0);
    }
}
