//! First-order optimizers over flat `f64` tensors.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd,
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Optimizer {
    pub fn state(&self) -> OptState {
        OptState {
            step: 0,
            moments: Vec::new(),
        }
    }
}

/// Per-tensor moment buffers, created lazily on the first step.
#[derive(Debug, Clone)]
pub struct OptState {
    step: u64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl OptState {
    /// Applies one update to every tensor. `params` and `grads` must list
    /// tensors in the same order on every call.
    pub fn step(&mut self, opt: &Optimizer, lr: f64, params: Vec<&mut [f64]>, grads: Vec<&[f64]>) {
        assert_eq!(params.len(), grads.len(), "tensor count mismatch");
        self.step += 1;
        if self.moments.is_empty() {
            self.moments = grads.iter().map(|g| (vec![0.0; g.len()], vec![0.0; g.len()])).collect();
        }
        for ((p, g), (m, v)) in params.into_iter().zip(grads).zip(&mut self.moments) {
            assert_eq!(p.len(), g.len(), "tensor length mismatch");
            match *opt {
                Optimizer::Sgd => {
                    for (p, g) in p.iter_mut().zip(g) {
                        *p -= lr * g;
                    }
                }
                Optimizer::Adam { beta1, beta2, eps } => {
                    let t = self.step as i32;
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    for i in 0..p.len() {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                        let mh = m[i] / c1;
                        let vh = v[i] / c2;
                        p[i] -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_step() {
        let mut p = vec![1.0, 2.0];
        let mut st = Optimizer::Sgd.state();
        st.step(&Optimizer::Sgd, 0.5, vec![&mut p], vec![&[2.0, -2.0]]);
        assert_eq!(p, [0.0, 3.0]);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let opt = Optimizer::default();
        let mut p = vec![0.0, 0.0];
        let mut st = opt.state();
        st.step(&opt, 0.1, vec![&mut p], vec![&[3.0, -0.5]]);
        assert!((p[0] + 0.1).abs() < 1e-6);
        assert!((p[1] - 0.1).abs() < 1e-6);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let opt = Optimizer::default();
        let mut p = vec![5.0];
        let mut st = opt.state();
        for _ in 0..2000 {
            let g = [2.0 * (p[0] - 1.0)];
            st.step(&opt, 0.05, vec![&mut p], vec![&g]);
        }
        assert!((p[0] - 1.0).abs() < 1e-2);
    }
}
