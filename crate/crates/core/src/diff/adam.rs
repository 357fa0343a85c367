use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { step_size: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Moments over a fixed list of parameter indices.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub indices: Vec<usize>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, indices: Vec<usize>) -> AdamState {
        let n = indices.len();
        AdamState { config, indices, m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }

    /// Bias-corrected Adam update of `params` at `self.indices`.
    /// `gradient` is either full-length (indexed by parameter) or subset-length.
    pub fn step(&mut self, params: &mut [f64], gradient: &[f64]) -> Result<()> {
        let full = gradient.len() == params.len();
        if !full && gradient.len() != self.indices.len() {
            return Err(Error::Shape(format!(
                "gradient has {} entries; expected {} or {}",
                gradient.len(),
                params.len(),
                self.indices.len()
            )));
        }
        if let Some(&bad) = self.indices.iter().find(|&&i| i >= params.len()) {
            return Err(Error::Shape(format!("subset index {bad} outside {} parameters", params.len())));
        }
        self.step += 1;
        let AdamConfig { step_size, beta1, beta2, epsilon } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (k, &i) in self.indices.iter().enumerate() {
            let g = if full { gradient[i] } else { gradient[k] };
            self.m[k] = beta1 * self.m[k] + (1.0 - beta1) * g;
            self.v[k] = beta2 * self.v[k] + (1.0 - beta2) * g * g;
            let mhat = self.m[k] / c1;
            let vhat = self.v[k] / c2;
            params[i] -= step_size * mhat / (vhat.sqrt() + epsilon);
        }
        Ok(())
    }
}
