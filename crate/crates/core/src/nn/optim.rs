//! First-order optimizers and the plateau learning-rate schedule.

use serde::{Deserialize, Serialize};

/// Optimizer choice and its hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerConfig {
    Adam {
        #[serde(default = "beta1")]
        beta1: f64,
        #[serde(default = "beta2")]
        beta2: f64,
        #[serde(default = "epsilon")]
        epsilon: f64,
    },
    Rmsprop {
        #[serde(default = "rho")]
        rho: f64,
        #[serde(default = "epsilon")]
        epsilon: f64,
    },
}

fn beta1() -> f64 {
    0.9
}

fn beta2() -> f64 {
    0.999
}

fn rho() -> f64 {
    0.9
}

fn epsilon() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn adam() -> Self {
        OptimizerConfig::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn rmsprop() -> Self {
        OptimizerConfig::Rmsprop {
            rho: 0.9,
            epsilon: 1e-8,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OptimizerConfig::Adam { .. } => "adam",
            OptimizerConfig::Rmsprop { .. } => "rmsprop",
        }
    }
}

/// Stateful optimizer over a fixed, ordered list of parameter tensors.
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    step: u64,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// Applies one update. `params` must list the same tensors in the same
    /// order on every call.
    pub fn step(&mut self, lr: f64, params: Vec<(&mut Vec<f32>, &Vec<f32>)>) {
        if self.second.is_empty() {
            self.first = params.iter().map(|(v, _)| vec![0.0; v.len()]).collect();
            self.second = self.first.clone();
        }
        assert_eq!(self.second.len(), params.len(), "optimizer parameter list changed");
        self.step += 1;
        match self.config {
            OptimizerConfig::Adam { beta1, beta2, epsilon } => {
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                let (b1, b2, eps) = (beta1 as f32, beta2 as f32, epsilon as f32);
                let step_size = (lr * c2.sqrt() / c1) as f32;
                let eps_hat = eps * c2.sqrt() as f32;
                for (((value, grad), m), v) in params.into_iter().zip(&mut self.first).zip(&mut self.second) {
                    for i in 0..value.len() {
                        let g = grad[i];
                        m[i] = b1 * m[i] + (1.0 - b1) * g;
                        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                        value[i] -= step_size * m[i] / (v[i].sqrt() + eps_hat);
                    }
                }
            }
            OptimizerConfig::Rmsprop { rho, epsilon } => {
                let (rho, eps, lr) = (rho as f32, epsilon as f32, lr as f32);
                for ((value, grad), v) in params.into_iter().zip(&mut self.second) {
                    for i in 0..value.len() {
                        let g = grad[i];
                        v[i] = rho * v[i] + (1.0 - rho) * g * g;
                        value[i] -= lr * g / (v[i].sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Divides the learning rate by `factor` after `patience` epochs without a
/// new validation minimum.
#[derive(Clone, Debug)]
pub struct PlateauSchedule {
    lr: f64,
    patience: usize,
    factor: f64,
    best: f64,
    stale: usize,
}

impl PlateauSchedule {
    pub fn new(lr: f64, patience: usize, factor: f64) -> Self {
        Self {
            lr,
            patience,
            factor,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Records one epoch's validation loss; returns true when the rate was reduced.
    pub fn observe(&mut self, val_loss: f64) -> bool {
        if val_loss < self.best {
            self.best = val_loss;
            self.stale = 0;
            return false;
        }
        self.stale += 1;
        if self.patience > 0 && self.stale >= self.patience {
            self.lr /= self.factor;
            self.stale = 0;
            return true;
        }
        false
    }
}
