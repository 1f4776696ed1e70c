use serde::{Deserialize, Serialize};

use super::params::{Gradients, ModelParams};
use super::tensor::Tensor;
use super::NumericsError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

/// Adam (or plain SGD) state for one [`ModelParams`] collection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl OptimizerState {
    pub fn adam(params: &ModelParams, lr: f64) -> Self {
        Self::new(OptimizerKind::Adam, params, lr)
    }

    pub fn sgd(params: &ModelParams, lr: f64) -> Self {
        Self::new(OptimizerKind::Sgd, params, lr)
    }

    pub fn new(kind: OptimizerKind, params: &ModelParams, lr: f64) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.value().shape())).collect();
        Self {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update in place and increments the step count.
    pub fn step(&mut self, params: &mut ModelParams, grads: &Gradients) -> Result<(), NumericsError> {
        if grads.0.len() != params.len() || self.first.len() != params.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "optimizer_step",
                detail: format!(
                    "{} parameters, {} gradients, {} moment slots",
                    params.len(),
                    grads.0.len(),
                    self.first.len()
                ),
            });
        }
        for (i, g) in grads.0.iter().enumerate() {
            let p = params.by_index(i);
            if p.value().shape() != g.shape() || self.first[i].shape() != g.shape() {
                return Err(NumericsError::ShapeMismatch {
                    op: "optimizer_step",
                    detail: format!("{}: {:?} vs {:?}", p.name(), p.value().shape(), g.shape()),
                });
            }
            if !g.is_finite() {
                return Err(NumericsError::NonFinite {
                    op: "optimizer_step",
                    node: i,
                });
            }
        }

        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (i, g) in grads.0.iter().enumerate() {
                    let w = params.by_index_mut(i).value_mut().data_mut();
                    for (w, &gi) in w.iter_mut().zip(g.data()) {
                        *w -= self.lr * gi;
                    }
                }
            }
            OptimizerKind::Adam => {
                let t = self.step as f64;
                let c1 = 1.0 - self.beta1.powf(t);
                let c2 = 1.0 - self.beta2.powf(t);
                for (i, g) in grads.0.iter().enumerate() {
                    let m = self.first[i].data_mut();
                    let v = self.second[i].data_mut();
                    let w = params.by_index_mut(i).value_mut().data_mut();
                    for k in 0..w.len() {
                        let gk = g.data()[k];
                        m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                        v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                        let m_hat = m[k] / c1;
                        let v_hat = v[k] / c2;
                        w[k] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                    }
                }
            }
        }
        Ok(())
    }
}
