use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Decay, Params};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub decay_factor: f64,
    pub decay_every_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-4,
            momentum: 0.9,
            weight_decay: 1e-4,
            decay_factor: 10.0,
            decay_every_epochs: 40,
            epochs: 100,
            batch_size: 4,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("optimizer: {m}")));
        if !(self.lr0 > 0.0) {
            return bad("lr0 must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if !(self.decay_factor > 1.0) {
            return bad("decay_factor must exceed 1");
        }
        if self.decay_every_epochs == 0 || self.epochs == 0 || self.batch_size == 0 {
            return bad("decay_every_epochs, epochs and batch_size must be positive");
        }
        Ok(())
    }
}

/// Step decay: `lr0 / decay_factor^⌊epoch / decay_every_epochs⌋`.
pub fn lr_schedule(epoch: usize, cfg: &OptimConfig) -> f64 {
    let k = (epoch / cfg.decay_every_epochs) as i32;
    cfg.lr0 / cfg.decay_factor.powi(k)
}

/// One momentum step on raw slices: `g' = g + wd·θ`, `v ← m·v + g'`,
/// `θ ← θ − lr·v`.
pub fn sgd_update<T: Scalar>(theta: &mut [T], grad: &[T], velocity: &mut [T], lr: T, momentum: T, weight_decay: T) {
    for ((th, &g), v) in theta.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        let g = g + weight_decay * *th;
        *v = momentum * *v + g;
        *th -= lr * *v;
    }
}

/// SGD with momentum and weight decay; parameters marked [`Decay::No`] are
/// not decayed. Velocities are keyed by parameter name and start at zero.
#[derive(Clone, Debug, Default)]
pub struct Sgd<T: Scalar> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    pub fn velocities(&self) -> &BTreeMap<String, Vec<T>> {
        &self.velocity
    }

    pub fn set_velocities(&mut self, v: BTreeMap<String, Vec<T>>) {
        self.velocity = v;
    }

    /// Updates every parameter of `model` from its accumulated gradient and
    /// replaces it with a fresh leaf.
    pub fn step(&mut self, model: &mut dyn Params<T>, lr: f64) -> Result<()> {
        // gather first so a missing gradient leaves the model untouched
        let mut grads = Vec::new();
        let mut missing = None;
        model.visit("", &mut |name, t, _| match t.grad() {
            Some(g) => grads.push(g),
            None => {
                missing.get_or_insert_with(|| name.to_string());
            }
        });
        if let Some(name) = missing {
            return Err(Error::MissingGradient(name));
        }
        let (lr, m) = (T::from_f64_lossy(lr), T::from_f64_lossy(self.momentum));
        let wd = T::from_f64_lossy(self.weight_decay);
        let mut grads = grads.into_iter();
        let mut err = None;
        model.visit_mut("", &mut |name, t, decay| {
            let g = grads.next().expect("same traversal");
            let v = self
                .velocity
                .entry(name.to_string())
                .or_insert_with(|| vec![T::zero(); g.len()]);
            if v.len() != g.len() {
                err.get_or_insert_with(|| {
                    Error::InvalidInput(format!("momentum buffer for {name} has the wrong size"))
                });
                return;
            }
            let mut theta = t.to_vec();
            let wd = if decay == Decay::Yes { wd } else { T::zero() };
            sgd_update(&mut theta, &g, v, lr, m, wd);
            *t = Tensor::from_vec(theta, t.shape())
                .expect("shape unchanged")
                .requires_grad();
        });
        err.map_or(Ok(()), Err)
    }
}
