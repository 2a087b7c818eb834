//! Adam with decoupled weight decay, and the multi-step learning-rate schedule.

use serde::{Deserialize, Serialize};

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

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<f64>,
    second: Vec<f64>,
}

impl AdamState {
    pub fn new(param_count: usize, config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: vec![0.0; param_count],
            second: vec![0.0; param_count],
        }
    }

    pub fn param_count(&self) -> usize {
        self.first.len()
    }

    /// One Adam update over parameter segments visited in a fixed order.
    ///
    /// Weight decay is decoupled: each parameter also loses `lr * wd * p`.
    pub fn step<'a, P, G>(&mut self, params: P, grads: G, lr: f64, weight_decay: f64) -> Result<()>
    where
        P: IntoIterator<Item = &'a mut [f64]>,
        G: IntoIterator<Item = &'a [f64]>,
    {
        let AdamConfig { beta1, beta2, eps } = self.config;
        self.step += 1;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let mut offset = 0usize;
        let mut grads = grads.into_iter();
        for seg in params {
            let g = grads
                .next()
                .ok_or_else(|| Error::Dimension("fewer gradient segments than parameter segments".into()))?;
            if g.len() != seg.len() {
                return Err(Error::Dimension(format!(
                    "gradient segment of {} for parameter segment of {}",
                    g.len(),
                    seg.len()
                )));
            }
            if offset + seg.len() > self.first.len() {
                return Err(Error::Dimension("optimizer state smaller than parameters".into()));
            }
            let m = &mut self.first[offset..offset + seg.len()];
            let v = &mut self.second[offset..offset + seg.len()];
            for i in 0..seg.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                seg[i] -= lr * weight_decay * seg[i] + lr * m_hat / (v_hat.sqrt() + eps);
            }
            offset += seg.len();
        }
        if grads.next().is_some() || offset != self.first.len() {
            return Err(Error::Dimension("optimizer state and parameters differ in size".into()));
        }
        Ok(())
    }
}

/// Step decay: `base_lr * gamma^(milestones passed)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
}

impl LrSchedule {
    pub fn new(base_lr: f64, milestones: Vec<usize>, gamma: f64) -> Result<Self> {
        let s = Self {
            base_lr,
            milestones,
            gamma,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("gamma must lie in (0, 1], got {}", self.gamma)));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("milestones must be strictly increasing".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.base_lr * self.gamma.powi(passed as i32)
    }
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base_lr: 5e-6,
            milestones: vec![20, 40],
            gamma: 0.1,
        }
    }
}
