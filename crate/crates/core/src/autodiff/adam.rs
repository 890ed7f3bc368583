//! Adam with per-group learning rates and step decay.

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates of one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Number of updates applied so far (for bias correction).
    pub t: u64,
}

impl AdamState {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of `param` in place.
pub fn adam_step(
    param: &mut Tensor,
    grad: &Tensor,
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if param.shape() != grad.shape() || state.m.len() != param.numel() {
        return Err(Error::Shape(format!(
            "adam: param {:?}, grad {:?}, state {}",
            param.shape(),
            grad.shape(),
            state.m.len()
        )));
    }
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    let g = grad.data();
    for (i, p) in param.data_mut().iter_mut().enumerate() {
        let m = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g[i];
        let v = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        state.m[i] = m;
        state.v[i] = v;
        *p -= lr * (m / bc1) / ((v / bc2).sqrt() + cfg.eps);
    }
    Ok(())
}

/// Multiplies the learning rate by `factor` after every `every` steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepDecay {
    pub every: usize,
    pub factor: f64,
}

impl StepDecay {
    pub fn lr_at(&self, base: f64, step: usize) -> f64 {
        if self.every == 0 {
            return base;
        }
        base * self.factor.powi((step / self.every) as i32)
    }
}

/// A named set of parameters sharing a learning rate.
#[derive(Debug, Clone)]
pub struct ParamGroup {
    pub name: String,
    pub lr: f64,
    pub params: Vec<Tensor>,
    states: Vec<AdamState>,
}

impl ParamGroup {
    pub fn new(name: impl Into<String>, lr: f64, params: Vec<Tensor>) -> Self {
        let states = params.iter().map(|p| AdamState::zeros(p.numel())).collect();
        Self {
            name: name.into(),
            lr,
            params,
            states,
        }
    }

    pub fn states(&self) -> &[AdamState] {
        &self.states
    }
}

/// Adam over several parameter groups. `lr_scale` multiplies every group's
/// base rate, which is how schedules are applied.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub groups: Vec<ParamGroup>,
    pub lr_scale: f64,
}

impl Adam {
    pub fn new(config: AdamConfig, groups: Vec<ParamGroup>) -> Self {
        Self {
            config,
            groups,
            lr_scale: 1.0,
        }
    }

    pub fn effective_lr(&self, group: usize) -> f64 {
        self.groups[group].lr * self.lr_scale
    }

    /// Updates every parameter; `grads[g][p]` pairs with `groups[g].params[p]`.
    pub fn step(&mut self, grads: &[Vec<Tensor>]) -> Result<()> {
        self.step_masked(grads, |_, _| true)
    }

    /// Updates only parameters for which `active(group, param)` holds;
    /// inactive parameters keep their value and moments.
    pub fn step_masked(
        &mut self,
        grads: &[Vec<Tensor>],
        active: impl Fn(usize, usize) -> bool,
    ) -> Result<()> {
        if grads.len() != self.groups.len() {
            return Err(Error::Shape(format!(
                "adam: {} gradient groups for {} parameter groups",
                grads.len(),
                self.groups.len()
            )));
        }
        let scale = self.lr_scale;
        for (gi, (group, g)) in self.groups.iter_mut().zip(grads).enumerate() {
            if g.len() != group.params.len() {
                return Err(Error::Shape(format!("adam: group {} size mismatch", group.name)));
            }
            let lr = group.lr * scale;
            for (pi, ((p, s), gr)) in group
                .params
                .iter_mut()
                .zip(group.states.iter_mut())
                .zip(g)
                .enumerate()
            {
                if active(gi, pi) {
                    adam_step(p, gr, s, lr, &self.config)?;
                }
            }
        }
        Ok(())
    }
}
