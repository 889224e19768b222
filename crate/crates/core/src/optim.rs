//! Adam with bias correction.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::ParamSet;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 2e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(Error::Config(format!(
                "bad Adam settings: lr {}, beta1 {}, beta2 {}, eps {}",
                self.learning_rate, self.beta1, self.beta2, self.eps
            )));
        }
        Ok(())
    }
}

/// Per-parameter first/second moment buffers plus the shared step count.
#[derive(Debug, Clone, Default)]
pub struct OptimizerState {
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(params: &ParamSet) -> Self {
        let mut state = OptimizerState::default();
        for (name, tensor) in params.iter() {
            state.m.insert(name.clone(), vec![0.0; tensor.numel()]);
            state.v.insert(name.clone(), vec![0.0; tensor.numel()]);
        }
        state
    }
}

/// One Adam update over every parameter, reading gradients from the
/// parameter set (a missing gradient counts as zero). `t` is incremented
/// before the update, so bias corrections cancel exactly at the first step.
pub fn adam_step(params: &mut ParamSet, state: &mut OptimizerState, cfg: &AdamConfig) -> Result<()> {
    cfg.validate()?;
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for (name, tensor) in params.iter_mut() {
        let n = tensor.numel();
        let m = state
            .m
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("optimizer state missing for {name}")))?;
        let v = state.v.get_mut(name).expect("m and v stay in sync");
        if m.len() != n {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                left: vec![m.len()],
                right: vec![n],
            });
        }
        let grad = tensor.grad.take();
        let theta = tensor.data_mut();
        match grad {
            Some(gr) => {
                for i in 0..n {
                    let gv = gr[i];
                    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gv;
                    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gv * gv;
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    theta[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
                }
            }
            None => {
                // zero gradient: moments decay, parameters move only if
                // momentum is already non-zero
                for i in 0..n {
                    m[i] *= cfg.beta1;
                    v[i] *= cfg.beta2;
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    theta[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
                }
            }
        }
    }
    Ok(())
}
