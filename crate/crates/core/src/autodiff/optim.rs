use serde::{Deserialize, Serialize};

use super::{AdError, MlpParams, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamSettings {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamSettings {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment state for one parameter set.
#[derive(Debug, Clone)]
pub struct OptimState {
    name: String,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
    pub lr: f64,
    pub settings: AdamSettings,
}

impl OptimState {
    pub fn new(name: impl Into<String>, params: &MlpParams, lr: f64) -> Self {
        let zeros: Vec<Tensor> = params
            .named_tensors()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        Self {
            name: name.into(),
            first: zeros.clone(),
            second: zeros,
            step: 0,
            lr,
            settings: AdamSettings::default(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one bias-corrected update. Gradients are checked for
    /// finiteness before anything is modified.
    pub fn step(&mut self, params: &mut MlpParams, grads: &MlpParams) -> Result<(), AdError> {
        let named = grads.named_tensors();
        if named.len() != self.first.len() {
            return Err(AdError::Layout(format!(
                "{}: gradient has {} tensors, state has {}",
                self.name,
                named.len(),
                self.first.len()
            )));
        }
        for ((pname, g), m) in named.iter().zip(&self.first) {
            if g.shape() != m.shape() {
                return Err(AdError::Layout(format!(
                    "{}.{pname}: gradient shape {:?} vs {:?}",
                    self.name,
                    g.shape(),
                    m.shape()
                )));
            }
            if !g.all_finite() {
                return Err(AdError::NonFiniteGradient(format!("{}.{pname}", self.name)));
            }
        }
        self.step += 1;
        let AdamSettings { beta1, beta2, eps } = self.settings;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, (_, g)), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(named)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            let (pd, gd) = (p.data_mut(), g.data());
            for i in 0..pd.len() {
                let gi = gd[i];
                let mi = beta1 * m.data()[i] + (1.0 - beta1) * gi;
                let vi = beta2 * v.data()[i] + (1.0 - beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                pd[i] -= self.lr * (mi / c1) / ((vi / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
