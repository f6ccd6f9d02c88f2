//! Adam with bias-corrected moment estimates.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step_count: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// One update: `p <- p - lr * m_hat / (sqrt(v_hat) + eps)`.
    /// Gradients must be keyed and shaped like the parameters they update.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.step_count += 1;
        let c1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let c2 = 1.0 - self.beta2.powi(self.step_count as i32);
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            if p.shape != g.shape {
                return Err(Error::shape(format!(
                    "gradient for `{}` has shape {:?}, parameter is {:?}",
                    name, g.shape, p.shape
                )));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape.clone()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape.clone()));
            for i in 0..g.data.len() {
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * g.data[i];
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * g.data[i] * g.data[i];
                let m_hat = m.data[i] / c1;
                let v_hat = v.data[i] / c2;
                p.data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
