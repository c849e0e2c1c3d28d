use serde::{Deserialize, Serialize};

use super::{Parameters, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd { momentum: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First-order optimizer state for one parameter vector.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, n_params: usize) -> Self {
        let v = match kind {
            OptimizerKind::Adam { .. } => vec![0.0; n_params],
            OptimizerKind::Sgd { .. } => Vec::new(),
        };
        Self {
            kind,
            lr,
            m: vec![0.0; n_params],
            v,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update with the given gradient.
    pub fn step<T: Scalar>(&mut self, params: &mut Parameters<T>, grads: &[T]) {
        assert_eq!(grads.len(), params.values.len());
        self.t += 1;
        match self.kind {
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let bc1 = 1.0 - beta1.powi(self.t as i32);
                let bc2 = 1.0 - beta2.powi(self.t as i32);
                for (i, (p, g)) in params.values.iter_mut().zip(grads).enumerate() {
                    let g = g.as_f64();
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                    let m_hat = self.m[i] / bc1;
                    let v_hat = self.v[i] / bc2;
                    let update = self.lr * m_hat / (v_hat.sqrt() + eps);
                    *p = T::from_f64_lossy(p.as_f64() - update);
                }
            }
            OptimizerKind::Sgd { momentum } => {
                for (i, (p, g)) in params.values.iter_mut().zip(grads).enumerate() {
                    self.m[i] = momentum * self.m[i] + g.as_f64();
                    *p = T::from_f64_lossy(p.as_f64() - self.lr * self.m[i]);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embednet::{init_network, ArchSpec};

    fn tiny() -> Parameters<f64> {
        init_network(
            &ArchSpec {
                input_size: 16,
                conv_channels: [1, 1, 1, 1],
                embed_dim: 2,
                two_digit_guard: true,
            },
            0,
        )
        .unwrap()
    }

    #[test]
    fn sgd_moves_against_the_gradient() {
        let mut p = tiny();
        let before = p.values.clone();
        let g = vec![1.0; p.len()];
        let mut opt = Optimizer::new(OptimizerKind::Sgd { momentum: 0.0 }, 0.1, p.len());
        opt.step(&mut p, &g);
        for (a, b) in p.values.iter().zip(&before) {
            assert!((a - (b - 0.1)).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_first_step_has_magnitude_lr() {
        let mut p = tiny();
        let before = p.values.clone();
        let g: Vec<f64> = (0..p.len()).map(|i| if i % 2 == 0 { 3.0 } else { -0.5 }).collect();
        let mut opt = Optimizer::new(OptimizerKind::default(), 1e-3, p.len());
        opt.step(&mut p, &g);
        for ((a, b), g) in p.values.iter().zip(&before).zip(&g) {
            assert!(((b - a) - 1e-3 * g.signum()).abs() < 1e-8);
        }
        assert_eq!(opt.steps(), 1);
    }
}
