//! First-order optimizers over named parameter tensors.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};
use crate::Scalar;

/// Optimizer choice and hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
    Sgd {
        lr: f64,
    },
}

impl OptimizerConfig {
    /// Adam at the fixed learning rate 1e-3.
    pub fn adam_default() -> Self {
        Self::adam(1e-3)
    }

    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Adam { lr, .. } | OptimizerConfig::Sgd { lr } => lr,
        }
    }
}

/// Adam first and second moments for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<S> {
    pub m: Vec<S>,
    pub v: Vec<S>,
}

/// Optimizer with persistent per-parameter state keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Optimizer<S: Scalar> {
    pub config: OptimizerConfig,
    /// Number of completed steps.
    pub step: u64,
    pub moments: BTreeMap<String, Moments<S>>,
}

fn missing_grad(name: &str) -> Error {
    Error::Contract(format!(
        "parameter `{name}` has no gradient; run backward before stepping"
    ))
}

/// Plain gradient descent: `p ← p − lr·g`.
pub fn sgd_step<'a, S: Scalar>(
    params: impl IntoIterator<Item = (&'a str, &'a mut Tensor<S>)>,
    lr: f64,
) -> Result<()> {
    let lr = S::c(lr);
    for (name, p) in params {
        let g = p.grad().ok_or_else(|| missing_grad(name))?;
        p.data_mut()
            .iter_mut()
            .zip(&g)
            .for_each(|(w, &g)| *w = *w - lr * g);
    }
    Ok(())
}

impl<S: Scalar> Optimizer<S> {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// One update over every parameter. Every parameter must carry a gradient.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = (&'a str, &'a mut Tensor<S>)>,
    ) -> Result<()> {
        let params: Vec<_> = params.into_iter().collect();
        if let Some((name, _)) = params.iter().find(|(_, p)| p.grad().is_none()) {
            return Err(missing_grad(name));
        }
        self.step += 1;
        match self.config {
            OptimizerConfig::Sgd { lr } => sgd_step(params, lr),
            OptimizerConfig::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                let t = self.step as i32;
                let bc1 = 1.0 - beta1.powi(t);
                let bc2 = 1.0 - beta2.powi(t);
                let (b1, b2) = (S::c(beta1), S::c(beta2));
                let (one_b1, one_b2) = (S::c(1.0 - beta1), S::c(1.0 - beta2));
                let step_size = S::c(lr / bc1);
                let (inv_sqrt_bc2, eps) = (S::c(1.0 / bc2.sqrt()), S::c(eps));
                for (name, p) in params {
                    let g = p.grad().expect("checked above");
                    let st = self
                        .moments
                        .entry(name.to_string())
                        .or_insert_with(|| Moments {
                            m: vec![S::zero(); g.len()],
                            v: vec![S::zero(); g.len()],
                        });
                    if st.m.len() != g.len() {
                        return Err(Error::Contract(format!(
                            "optimizer state for `{name}` has wrong length"
                        )));
                    }
                    let w = p.data_mut();
                    for i in 0..g.len() {
                        st.m[i] = b1 * st.m[i] + one_b1 * g[i];
                        st.v[i] = b2 * st.v[i] + one_b2 * g[i] * g[i];
                        w[i] = w[i] - step_size * st.m[i] / (st.v[i].sqrt() * inv_sqrt_bc2 + eps);
                    }
                }
                Ok(())
            }
        }
    }
}
