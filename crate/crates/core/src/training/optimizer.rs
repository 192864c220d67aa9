//! First-order parameter updates.

use super::OptimizerKind;

#[derive(Debug, Clone)]
pub(crate) enum OptimizerState {
    Sgd,
    Adam { m: Vec<f64>, v: Vec<f64>, t: u32, beta1: f64, beta2: f64, epsilon: f64 },
}

impl OptimizerState {
    pub(crate) fn new(kind: OptimizerKind, dim: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => OptimizerState::Sgd,
            OptimizerKind::Adam { beta1, beta2, epsilon } => OptimizerState::Adam {
                m: vec![0.0; dim],
                v: vec![0.0; dim],
                t: 0,
                beta1,
                beta2,
                epsilon,
            },
        }
    }

    pub(crate) fn apply(&mut self, weights: &mut [f64], grad: &[f64], lr: f64) {
        debug_assert_eq!(weights.len(), grad.len());
        match self {
            OptimizerState::Sgd => {
                for (w, g) in weights.iter_mut().zip(grad) {
                    *w -= lr * g;
                }
            }
            OptimizerState::Adam { m, v, t, beta1, beta2, epsilon } => {
                *t += 1;
                let bc1 = 1.0 - beta1.powi(*t as i32);
                let bc2 = 1.0 - beta2.powi(*t as i32);
                for i in 0..weights.len() {
                    m[i] = *beta1 * m[i] + (1.0 - *beta1) * grad[i];
                    v[i] = *beta2 * v[i] + (1.0 - *beta2) * grad[i] * grad[i];
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    weights[i] -= lr * m_hat / (v_hat.sqrt() + *epsilon);
                }
            }
        }
    }
}
