//! AdamW with decoupled weight decay, and the cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    moments: Vec<Option<(Tensor, Tensor)>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        AdamW { config, step: 0, moments: vec![None; store.len()] }
    }

    /// One update. Frozen parameters and parameters without a gradient are
    /// left untouched, moments included.
    pub fn apply(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (id, grad) in grads {
            let p = store.get_mut(*id);
            if p.frozen {
                continue;
            }
            if grad.shape() != p.tensor.shape() {
                return Err(Error::shape("adamw", format!("{}: grad {:?} vs param {:?}", p.name, grad.shape(), p.tensor.shape())));
            }
            let slot = &mut self.moments[id.index()];
            let (m, v) = slot.get_or_insert_with(|| (Tensor::zeros(grad.shape().to_vec()), Tensor::zeros(grad.shape().to_vec())));
            let (m, v) = (m.data_mut(), v.data_mut());
            for (i, (w, g)) in p.tensor.data_mut().iter_mut().zip(grad.data()).enumerate() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *w -= lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * *w);
            }
        }
        Ok(())
    }

    /// Moments and step count as named tensors (`adam.m.<param>`,
    /// `adam.v.<param>`, `adam.step`).
    pub fn state(&self, store: &ParamStore) -> Result<ParamStore> {
        let mut out = ParamStore::new();
        out.add("adam.step", Tensor::new(vec![1], vec![self.step as f64])?, false)?;
        for (id, p) in store.iter() {
            if let Some((m, v)) = &self.moments[id.index()] {
                out.add(format!("adam.m.{}", p.name), m.clone(), false)?;
                out.add(format!("adam.v.{}", p.name), v.clone(), false)?;
            }
        }
        Ok(out)
    }

    pub fn from_state(config: AdamWConfig, store: &ParamStore, state: &ParamStore) -> Result<Self> {
        let step = state
            .by_name("adam.step")
            .map(|p| p.tensor.data()[0])
            .ok_or_else(|| Error::invalid("optimizer state has no step counter"))?;
        let mut opt = AdamW { config, step: step as u64, moments: vec![None; store.len()] };
        for (id, p) in store.iter() {
            let m = state.by_name(&format!("adam.m.{}", p.name));
            let v = state.by_name(&format!("adam.v.{}", p.name));
            if let (Some(m), Some(v)) = (m, v) {
                if m.tensor.shape() != p.tensor.shape() || v.tensor.shape() != p.tensor.shape() {
                    return Err(Error::invalid(format!("optimizer state shape mismatch for {}", p.name)));
                }
                opt.moments[id.index()] = Some((m.tensor.clone(), v.tensor.clone()));
            }
        }
        Ok(opt)
    }
}

/// `peak · ½(1 + cos(π·step/(total−1)))`: `peak` at step 0, 0 at the last step.
pub fn cosine_lr(peak: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return peak;
    }
    let progress = (step.min(total - 1)) as f64 / (total - 1) as f64;
    peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}
