//! AdamW with decoupled weight decay, and the polynomial learning-rate decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Parameters;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |b: f64| (0.0..1.0).contains(&b);
        if !in_unit(self.beta1) || !in_unit(self.beta2) || !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("invalid AdamW hyperparameters {self:?}")));
        }
        Ok(())
    }
}

/// First and second moments of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamWState {
    /// Completed steps.
    pub t: u64,
    /// Keyed by parameter name.
    pub moments: BTreeMap<String, Moments>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub state: AdamWState,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Result<Self> {
        config.validate()?;
        Ok(AdamW {
            config,
            state: AdamWState::default(),
        })
    }

    /// One update of every parameter of `model` from its accumulated
    /// gradient. Parameters are replaced by fresh leaves with cleared grads.
    ///
    /// Fails without touching the model or the state if any gradient is
    /// missing, mis-shaped or non-finite.
    pub fn step(&mut self, model: &mut dyn Parameters, lr: f64) -> Result<()> {
        let mut updates: BTreeMap<String, (Vec<f64>, Moments)> = BTreeMap::new();
        let mut failure = None;
        let t = self.state.t + 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let c1 = 1.0 - beta1.powi(t as i32);
        let c2 = 1.0 - beta2.powi(t as i32);
        model.visit("", &mut |name, p| {
            if failure.is_some() {
                return;
            }
            let Some(g) = p.grad() else {
                failure = Some(Error::contract("adamw_step", format!("parameter {name} has no gradient")));
                return;
            };
            if g.len() != p.len() {
                failure = Some(Error::shape("adamw_step", &[g.len()], p.shape()));
                return;
            }
            if g.iter().any(|v| !v.is_finite()) {
                failure = Some(Error::NonFinite("adamw_step"));
                return;
            }
            let mut mom = self.state.moments.get(&name).cloned().unwrap_or_else(|| Moments {
                m: vec![0.0; p.len()],
                v: vec![0.0; p.len()],
            });
            if mom.m.len() != p.len() {
                failure = Some(Error::shape("adamw_step", &[mom.m.len()], p.shape()));
                return;
            }
            let mut theta = p.data().to_vec();
            for i in 0..theta.len() {
                mom.m[i] = beta1 * mom.m[i] + (1.0 - beta1) * g[i];
                mom.v[i] = beta2 * mom.v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = mom.m[i] / c1;
                let v_hat = mom.v[i] / c2;
                theta[i] -= lr * m_hat / (v_hat.sqrt() + eps) + lr * weight_decay * theta[i];
            }
            updates.insert(name, (theta, mom));
        });
        if let Some(e) = failure {
            return Err(e);
        }
        let mut replace_err = None;
        model.visit_mut("", &mut |name, p| {
            if let Some((theta, _)) = updates.get(&name) {
                match Tensor::parameter(theta.clone(), p.shape()) {
                    Ok(fresh) => *p = fresh,
                    Err(e) => replace_err = Some(e),
                }
            }
        });
        if let Some(e) = replace_err {
            return Err(e);
        }
        for (name, (_, mom)) in updates {
            self.state.moments.insert(name, mom);
        }
        self.state.t = t;
        Ok(())
    }
}

/// `base_lr · (1 − t/T)^power`, zero past `T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolySchedule {
    pub base_lr: f64,
    pub total_steps: u64,
    pub power: f64,
}

impl PolySchedule {
    pub fn new(base_lr: f64, total_steps: u64, power: f64) -> Result<Self> {
        if total_steps == 0 || !(power > 0.0) || !(base_lr >= 0.0) {
            return Err(Error::Config(format!(
                "poly schedule needs T ≥ 1, p > 0, lr ≥ 0 (got T={total_steps}, p={power}, lr={base_lr})"
            )));
        }
        Ok(PolySchedule {
            base_lr,
            total_steps,
            power,
        })
    }

    pub fn lr(&self, step: u64) -> f64 {
        if step >= self.total_steps {
            return 0.0;
        }
        self.base_lr * (1.0 - step as f64 / self.total_steps as f64).powf(self.power)
    }
}

/// Free-function form of [`PolySchedule::lr`].
pub fn poly_lr(schedule: &PolySchedule, step: u64) -> f64 {
    schedule.lr(step)
}
