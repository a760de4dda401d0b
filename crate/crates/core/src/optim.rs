//! First-order optimizers over flat lists of parameter tensors.
//!
//! State is keyed by position, so callers must pass parameters in the
//! same order on every step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn sgd(momentum: f64) -> Self {
        OptimizerKind::Sgd { momentum }
    }

    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Optimizer {
            kind,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        }
    }

    /// Applies one update with learning rate `lr`. Tensors without a
    /// gradient buffer are left untouched.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor>, lr: f64) -> Result<()> {
        self.steps += 1;
        let t = self.steps as i32;
        for (slot, p) in params.into_iter().enumerate() {
            if self.first.len() <= slot {
                self.first.push(vec![0.0; p.numel()]);
                self.second.push(Vec::new());
            }
            if self.first[slot].len() != p.numel() {
                return Err(Error::Contract(format!(
                    "optimizer slot {slot} changed size ({} -> {})",
                    self.first[slot].len(),
                    p.numel()
                )));
            }
            let Some(grad) = p.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let m = &mut self.first[slot];
            match self.kind {
                OptimizerKind::Sgd { momentum } => {
                    for ((w, g), v) in p.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()) {
                        *v = momentum * *v + g;
                        *w -= lr * *v;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let v = &mut self.second[slot];
                    if v.is_empty() {
                        v.resize(grad.len(), 0.0);
                    }
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    for (((w, g), m), v) in p.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<'a>(params: impl IntoIterator<Item = &'a mut Tensor>, max_norm: f64) -> f64 {
    let mut params: Vec<&mut Tensor> = params.into_iter().collect();
    let norm = params
        .iter()
        .filter_map(|p| p.grad())
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for p in params.iter_mut() {
            if let Some(g) = p.grad().map(|g| g.iter().map(|v| v * scale).collect::<Vec<_>>()) {
                p.zero_grad();
                p.accumulate_grad(&g).expect("same length");
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_with_momentum_matches_hand_computation() {
        let mut p = Tensor::new(vec![1], vec![1.0]).unwrap().tracked();
        let mut opt = Optimizer::new(OptimizerKind::sgd(0.5));
        p.accumulate_grad(&[2.0]).unwrap();
        opt.step([&mut p], 0.1).unwrap();
        assert!((p.data()[0] - 0.8).abs() < 1e-15);
        // velocity 0.5 * 2 + 2 = 3
        opt.step([&mut p], 0.1).unwrap();
        assert!((p.data()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap().tracked();
        p.accumulate_grad(&[3.0, -0.01]).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::adam());
        opt.step([&mut p], 0.01).unwrap();
        assert!((p.data()[0] + 0.01).abs() < 1e-8);
        assert!((p.data()[1] - 0.01).abs() < 1e-6);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut a = Tensor::zeros(&[1]).tracked();
        let mut b = Tensor::zeros(&[1]).tracked();
        a.accumulate_grad(&[3.0]).unwrap();
        b.accumulate_grad(&[4.0]).unwrap();
        let before = clip_grad_norm([&mut a, &mut b], 1.0);
        assert_eq!(before, 5.0);
        assert!((a.grad().unwrap()[0] - 0.6).abs() < 1e-15);
        assert!((b.grad().unwrap()[0] - 0.8).abs() < 1e-15);
    }
}
