use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub weight_decay: f32,
    pub eps: f32,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f32>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.01,
            eps: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Self {
        let zeros = || params.ids().map(|id| vec![0.0; params.get(id).numel()]).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update using the gradients stored on `params`.
    ///
    /// Returns the global gradient norm measured before clipping.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<f32> {
        for id in params.ids() {
            if params.get(id).grad().is_none() {
                return Err(Error::MissingGrad(params.name(id).to_string()));
            }
        }
        let norm = params.grad_norm();
        let clip = match self.config.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            weight_decay,
            eps,
            ..
        } = self.config;
        let bc1 = 1.0 - (beta1 as f64).powi(self.step as i32);
        let bc2 = 1.0 - (beta2 as f64).powi(self.step as i32);
        let ids: Vec<ParamId> = params.ids().collect();
        for id in ids {
            let decay = if params.decays(id) { weight_decay } else { 0.0 };
            let t = params.get_mut(id);
            let grad = t.grad().expect("checked above").to_vec();
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            for (j, p) in t.data_mut().iter_mut().enumerate() {
                let g = grad[j] * clip;
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let m_hat = (m[j] as f64 / bc1) as f32;
                let v_hat = (v[j] as f64 / bc2) as f32;
                *p -= lr * (m_hat / (v_hat.sqrt() + eps) + decay * *p);
            }
        }
        Ok(norm)
    }
}
