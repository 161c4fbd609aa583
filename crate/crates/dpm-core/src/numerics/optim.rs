//! SGD and Adam over a fixed parameter list.

use crate::error::{DpmError, Result};

use super::tensor::{Scalar, Tensor};

/// Which update rule an [`Optimizer`] applies.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Optimizer state for one parameter group. Moment buffers are allocated
/// lazily on the first step and exist only for Adam.
pub struct Optimizer<F: Scalar> {
    pub kind: OptimizerKind,
    pub learning_rate: F,
    pub step_count: u64,
    moments: Vec<(Vec<F>, Vec<F>)>,
}

impl<F: Scalar> Optimizer<F> {
    pub fn new(kind: OptimizerKind, learning_rate: F) -> Self {
        Optimizer {
            kind,
            learning_rate,
            step_count: 0,
            moments: Vec::new(),
        }
    }

    /// Apply one update to every parameter. Parameter order must be stable
    /// across calls; each must carry a populated gradient.
    pub fn step(&mut self, params: &[Tensor<F>]) -> Result<()> {
        if self.kind == OptimizerKind::Adam && self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|p| (vec![F::zero(); p.numel()], vec![F::zero(); p.numel()]))
                .collect();
        }
        if self.kind == OptimizerKind::Adam && self.moments.len() != params.len() {
            return Err(DpmError::InvalidConfig(format!(
                "optimizer holds moments for {} params, got {}",
                self.moments.len(),
                params.len()
            )));
        }
        self.step_count += 1;
        let lr = self.learning_rate;
        for (idx, p) in params.iter().enumerate() {
            let grad = p.grad().ok_or_else(|| {
                DpmError::InvalidConfig(format!("parameter {idx} has no gradient"))
            })?;
            if grad.len() != p.numel() {
                return Err(DpmError::Shape {
                    op: "optimizer_step",
                    details: format!("grad len {} vs param {}", grad.len(), p.numel()),
                });
            }
            let mut data = p.data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (v, g) in data.iter_mut().zip(&grad) {
                        *v = *v - lr * *g;
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = &mut self.moments[idx];
                    if m.len() != grad.len() {
                        return Err(DpmError::Shape {
                            op: "optimizer_step",
                            details: format!("moment len {} vs grad {}", m.len(), grad.len()),
                        });
                    }
                    let b1 = F::from_f64(ADAM_BETA1);
                    let b2 = F::from_f64(ADAM_BETA2);
                    let eps = F::from_f64(ADAM_EPS);
                    let t = self.step_count as i32;
                    let c1 = F::one() - F::from_f64(ADAM_BETA1.powi(t));
                    let c2 = F::one() - F::from_f64(ADAM_BETA2.powi(t));
                    for i in 0..grad.len() {
                        let g = grad[i];
                        m[i] = b1 * m[i] + (F::one() - b1) * g;
                        v[i] = b2 * v[i] + (F::one() - b2) * g * g;
                        let mhat = m[i] / c1;
                        let vhat = v[i] / c2;
                        data[i] = data[i] - lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }

    /// Clear gradients on every parameter.
    pub fn zero_grad(&self, params: &[Tensor<F>]) {
        for p in params {
            p.zero_grad();
        }
    }

    /// True when Adam moment buffers have been allocated.
    pub fn has_moments(&self) -> bool {
        !self.moments.is_empty()
    }
}
