//! Per-tensor SGD and Adam.

use std::collections::HashMap;

use fedpet_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
        #[serde(default)]
        momentum: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
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

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    pub fn sgd(lr: f64) -> Self {
        OptimizerConfig::Sgd { lr, momentum: 0.0 }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { lr, .. } | OptimizerConfig::Adam { lr, .. } => lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerConfig::Sgd { lr, momentum } => lr >= 0.0 && (0.0..1.0).contains(&momentum),
            OptimizerConfig::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => lr >= 0.0 && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Optimizer state for one training session.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    steps: u64,
    first: HashMap<String, Vec<f64>>,
    second: HashMap<String, Vec<f64>>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Optimizer {
            config,
            steps: 0,
            first: HashMap::new(),
            second: HashMap::new(),
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    /// Advances the step counter; call once before updating the tensors of a step.
    pub fn begin_step(&mut self) {
        self.steps += 1;
    }

    /// Returns the updated value of `param` given its gradient.
    pub fn update(&mut self, name: &str, param: &Tensor, grad: &Tensor) -> Result<Tensor> {
        if param.shape() != grad.shape() {
            return Err(Error::Contract(format!(
                "gradient shape {:?} for parameter {name} of shape {:?}",
                grad.shape(),
                param.shape()
            )));
        }
        let p = param.data();
        let g = grad.data();
        let out: Vec<f64> = match self.config {
            OptimizerConfig::Sgd { lr, momentum } => {
                if momentum == 0.0 {
                    p.iter().zip(g).map(|(p, g)| p - lr * g).collect()
                } else {
                    let buf = self
                        .first
                        .entry(name.to_string())
                        .or_insert_with(|| vec![0.0; p.len()]);
                    buf.iter_mut()
                        .zip(g)
                        .zip(p)
                        .map(|((b, g), p)| {
                            *b = momentum * *b + g;
                            p - lr * *b
                        })
                        .collect()
                }
            }
            OptimizerConfig::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                let t = self.steps.max(1) as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                let m = self
                    .first
                    .entry(name.to_string())
                    .or_insert_with(|| vec![0.0; p.len()]);
                let v = self
                    .second
                    .entry(name.to_string())
                    .or_insert_with(|| vec![0.0; p.len()]);
                (0..p.len())
                    .map(|i| {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                        let mhat = m[i] / c1;
                        let vhat = v[i] / c2;
                        p[i] - lr * mhat / (vhat.sqrt() + eps)
                    })
                    .collect()
            }
        };
        Ok(Tensor::new(param.shape().to_vec(), out)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn sgd_step() {
        let mut o = Optimizer::new(OptimizerConfig::sgd(0.5));
        o.begin_step();
        let p = o.update("w", &t(&[1.0, 2.0]), &t(&[2.0, -2.0])).unwrap();
        assert_eq!(p.data(), &[0.0, 3.0]);
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut o = Optimizer::new(OptimizerConfig::sgd(0.0));
        o.begin_step();
        let p0 = t(&[0.25, -3.0, 0.0]);
        let p = o.update("w", &p0, &t(&[1.0, -5.0, 2.0])).unwrap();
        assert!(p.bits_eq(&p0));
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let mut o = Optimizer::new(OptimizerConfig::adam(0.1));
        o.begin_step();
        let p = o.update("w", &t(&[0.0, 0.0]), &t(&[3.0, -0.5])).unwrap();
        assert!((p.data()[0] + 0.1).abs() < 1e-8);
        assert!((p.data()[1] - 0.1).abs() < 1e-7);
    }

    #[test]
    fn momentum_accumulates() {
        let mut o = Optimizer::new(OptimizerConfig::Sgd {
            lr: 1.0,
            momentum: 0.5,
        });
        let g = t(&[1.0]);
        o.begin_step();
        let p = o.update("w", &t(&[0.0]), &g).unwrap();
        o.begin_step();
        let p = o.update("w", &p, &g).unwrap();
        assert_eq!(p.data(), &[-2.5]);
    }
}
