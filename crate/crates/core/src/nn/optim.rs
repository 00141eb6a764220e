use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::tensor::{Gradients, ParamId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
        #[serde(default)]
        weight_decay: f64,
    },
    Sgd {
        lr: f64,
        #[serde(default)]
        momentum: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam {
            lr: 1e-3,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Adam { lr, .. } | OptimizerConfig::Sgd { lr, .. } => lr,
        }
    }
}

/// First-order optimiser over the trainable parameters of a [`ParamStore`].
#[derive(Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    step: u64,
    first: HashMap<ParamId, Vec<f64>>,
    second: HashMap<ParamId, Vec<f64>>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            step: 0,
            first: HashMap::new(),
            second: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &ParamStore, grads: &Gradients) {
        self.step += 1;
        let t = self.step as i32;
        for p in store.trainable() {
            let Some(g) = grads.param(p.id()) else { continue };
            let mut w = p.values().as_ref().clone();
            match self.config {
                OptimizerConfig::Adam {
                    lr,
                    beta1,
                    beta2,
                    eps,
                    weight_decay,
                } => {
                    let m = self.first.entry(p.id()).or_insert_with(|| vec![0.0; w.len()]);
                    let v = self.second.entry(p.id()).or_insert_with(|| vec![0.0; w.len()]);
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    for i in 0..w.len() {
                        let gi = g[i] + weight_decay * w[i];
                        m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                        v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                        w[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                    }
                }
                OptimizerConfig::Sgd { lr, momentum } => {
                    let m = self.first.entry(p.id()).or_insert_with(|| vec![0.0; w.len()]);
                    for i in 0..w.len() {
                        m[i] = momentum * m[i] + g[i];
                        w[i] -= lr * m[i];
                    }
                }
            }
            p.set(w).expect("shape preserved");
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Init, ParamBuilder};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adam_minimises_quadratic() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = ParamBuilder::new(&mut store, &mut rng)
            .param("x", &[2], Init::Const(3.0))
            .unwrap();
        let mut opt = Optimizer::new(OptimizerConfig::Adam {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        });
        for _ in 0..300 {
            let loss = p.tensor().sqr().unwrap().sum_all().unwrap();
            let g = loss.backward().unwrap();
            opt.step(&store, &g);
        }
        assert!(p.values().iter().all(|v| v.abs() < 1e-2));
    }
}
