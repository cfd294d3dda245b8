use serde::{Deserialize, Serialize};

use super::nn::{Grads, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
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

/// First and second moment estimates for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// One AdamW update on a flat parameter. `step` counts from 1.
///
/// Weight decay is decoupled: the parameter is shrunk by `1 - lr·wd` before
/// the bias-corrected Adam step is applied.
pub fn adamw_step(
    param: &mut [f64],
    grad: &[f64],
    moments: &mut Moments,
    step: u64,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if lr <= 0.0 || !lr.is_finite() {
        return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
    }
    if step == 0 {
        return Err(Error::Config("adam steps count from 1".into()));
    }
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    let decay = 1.0 - lr * cfg.weight_decay;
    for i in 0..param.len() {
        let g = grad[i];
        moments.m[i] = cfg.beta1 * moments.m[i] + (1.0 - cfg.beta1) * g;
        moments.v[i] = cfg.beta2 * moments.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = moments.m[i] / bc1;
        let v_hat = moments.v[i] / bc2;
        param[i] = param[i] * decay - lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// AdamW over a whole [`ParamStore`]. Frozen parameters and parameters with
/// no gradient are left untouched.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    state: Vec<Option<Moments>>,
    step: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            state: Vec::new(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, lr: f64) -> Result<()> {
        self.step += 1;
        if self.state.len() < store.len() {
            self.state.resize(store.len(), None);
        }
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if !store.param(id).trainable {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let n = g.len();
            let moments = self.state[id.index()].get_or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            adamw_step(store.get_mut(id).data_mut(), g, moments, self.step, lr, &self.cfg)?;
        }
        Ok(())
    }
}

/// Piecewise-constant schedule: `base`, multiplied by `factor` at each
/// milestone (given as a fraction of the total step count).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub base: f64,
    pub milestones: Vec<f64>,
    pub factor: f64,
}

impl StepSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.base <= 0.0 {
            return Err(Error::Config(format!("base learning rate {} must be positive", self.base)));
        }
        let mut prev = 0.0;
        for &m in &self.milestones {
            if !(m > prev && m < 1.0) {
                return Err(Error::Config(format!(
                    "milestones must be increasing fractions in (0,1), got {:?}",
                    self.milestones
                )));
            }
            prev = m;
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let passed = self
            .milestones
            .iter()
            .filter(|&&m| step as f64 >= (m * total as f64).round())
            .count();
        self.base * self.factor.powi(passed as i32)
    }
}
