//! AdamW with decoupled weight decay.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::tensor::ParamSet;

/// Optimizer state plus hyperparameters for one parameter set.
///
/// The weight decay is decoupled: parameters shrink by `lr * weight_decay`
/// before the moment-based update is applied.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    step: u64,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

impl AdamW {
    pub fn new(lr: f32) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn with_weight_decay(mut self, wd: f32) -> Self {
        self.weight_decay = wd;
        self
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update in place. Every parameter in `params` must carry a
    /// gradient; the error names the first one that does not.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        params.require_grads()?;
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - (self.beta1 as f64).powf(t);
        let bc2 = 1.0 - (self.beta2 as f64).powf(t);
        let (b1, b2) = (self.beta1, self.beta2);
        let decay = 1.0 - self.lr * self.weight_decay;
        for (name, tensor) in params.iter_mut() {
            let grad = tensor.grad().expect("checked above").to_vec();
            let n = grad.len();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let data = tensor.data_mut();
            for i in 0..n {
                let g = grad[i];
                if self.weight_decay != 0.0 {
                    data[i] *= decay;
                }
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let m_hat = f64::from(m[i]) / bc1;
                let v_hat = f64::from(v[i]) / bc2;
                data[i] -= (f64::from(self.lr) * m_hat / (v_hat.sqrt() + f64::from(self.eps))) as f32;
            }
        }
        Ok(())
    }

    /// Multiplies the learning rate by `factor` (schedule decay).
    pub fn decay_lr(&mut self, factor: f32) {
        self.lr *= factor;
    }

    /// Moment buffers and step counter for checkpointing, flattened under
    /// the reserved `opt/` prefix.
    pub fn export_state(&self) -> Vec<(String, Vec<usize>, Vec<f32>)> {
        let mut out = Vec::new();
        out.push(("opt/step".to_string(), vec![1], vec![self.step as f32]));
        out.push(("opt/lr".to_string(), vec![1], vec![self.lr]));
        for (name, buf) in &self.m {
            out.push((format!("opt/m/{name}"), vec![buf.len()], buf.clone()));
        }
        for (name, buf) in &self.v {
            out.push((format!("opt/v/{name}"), vec![buf.len()], buf.clone()));
        }
        out
    }

    /// Restores state exported by [`Self::export_state`].
    pub fn import_state(&mut self, entries: &[(String, Vec<f32>)]) {
        for (name, data) in entries {
            if name == "opt/step" {
                self.step = data[0] as u64;
            } else if name == "opt/lr" {
                self.lr = data[0];
            } else if let Some(p) = name.strip_prefix("opt/m/") {
                self.m.insert(p.to_string(), data.clone());
            } else if let Some(p) = name.strip_prefix("opt/v/") {
                self.v.insert(p.to_string(), data.clone());
            }
        }
    }
}
