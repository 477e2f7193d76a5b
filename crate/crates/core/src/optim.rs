// SPDX-License-Identifier: Apache-2.0

//! First-order update rules over flat parameter vectors.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    /// Plain gradient descent with a fixed step.
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct OptimizerState {
    kind: Optimizer,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl OptimizerState {
    pub fn new(kind: Optimizer, len: usize) -> Self {
        let (m, v) = match kind {
            Optimizer::Sgd => (Vec::new(), Vec::new()),
            Optimizer::Adam { .. } => (vec![0.0; len], vec![0.0; len]),
        };
        OptimizerState { kind, m, v, t: 0 }
    }

    /// Descends along `grad` (the gradient of a loss to minimise).
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        debug_assert_eq!(params.len(), grad.len());
        match self.kind {
            Optimizer::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                self.t += 1;
                let c1 = 1.0 - beta1.powi(self.t);
                let c2 = 1.0 - beta2.powi(self.t);
                for i in 0..params.len() {
                    let g = grad[i];
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                    let mh = self.m[i] / c1;
                    let vh = self.v[i] / c2;
                    params[i] -= lr * mh / (vh.sqrt() + eps);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_rules_descend_a_quadratic() {
        for kind in [Optimizer::Sgd, Optimizer::adam()] {
            let mut x = vec![3.0, -2.0];
            let mut st = OptimizerState::new(kind, 2);
            for _ in 0..500 {
                let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
                st.step(&mut x, &g, 0.05);
            }
            assert!(x.iter().all(|v| v.abs() < 1e-2), "{kind:?} ended at {x:?}");
        }
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let mut x = vec![1.0, 2.0];
        let mut st = OptimizerState::new(Optimizer::adam(), 2);
        st.step(&mut x, &[5.0, -5.0], 0.0);
        assert_eq!(x, vec![1.0, 2.0]);
    }
}
