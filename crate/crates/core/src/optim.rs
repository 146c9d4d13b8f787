//! Adaptive-moment optimizer with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::params::Param;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Optimizer state: first and second moments per parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub steps: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
}

impl AdamW {
    pub fn new<'a>(config: AdamWConfig, params: impl IntoIterator<Item = &'a Param>) -> Result<Self> {
        config.validate()?;
        let zeros: Vec<Tensor> = params
            .into_iter()
            .map(|p| Tensor::zeros(p.value.rows(), p.value.cols()))
            .collect();
        Ok(Self {
            config,
            steps: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        })
    }

    /// One update. Decayed parameters are first scaled by `1 − lr·wd`, then
    /// moved by the bias-corrected moment ratio. A missing gradient counts as zero.
    pub fn step(&mut self, params: &mut [&mut Param], grads: &[Option<&Tensor>]) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(Error::Dimension(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.first_moment.len(),
                params.len(),
                grads.len()
            )));
        }
        self.steps += 1;
        let AdamWConfig {
            learning_rate: lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powf(self.steps as f64);
        let bc2 = 1.0 - beta2.powf(self.steps as f64);
        for (k, p) in params.iter_mut().enumerate() {
            let m = self.first_moment[k].data_mut();
            let v = self.second_moment[k].data_mut();
            if p.decay && weight_decay > 0.0 {
                let keep = 1.0 - lr * weight_decay;
                p.value.data_mut().iter_mut().for_each(|x| *x *= keep);
            }
            let g = grads[k].map(Tensor::data);
            for (i, x) in p.value.data_mut().iter_mut().enumerate() {
                let gi = g.map_or(0.0, |g| g[i]);
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *x -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
