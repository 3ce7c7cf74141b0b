//! Plain SGD and RMSprop (decay 0.9, epsilon 1e-8 inside the square root).

use crate::error::{shape_err, KernelError, Result};
use crate::tensor::Tensor;

pub const RMSPROP_DECAY: f64 = 0.9;
pub const RMSPROP_EPS: f64 = 1e-8;

/// `params -= lr * grads`
pub fn sgd_step(params: &mut Tensor, grads: &Tensor, lr: f64) -> Result<()> {
    params.same_shape(grads)?;
    for (p, g) in params.data_mut().iter_mut().zip(grads.data()) {
        *p -= lr * g;
    }
    ensure_finite(params, "sgd_step")
}

/// `v = decay*v + (1-decay)*g^2; params -= lr * g / sqrt(v + eps)`
pub fn rmsprop_step(
    accum: &mut Tensor,
    params: &mut Tensor,
    grads: &Tensor,
    lr: f64,
    decay: f64,
    eps: f64,
) -> Result<()> {
    params.same_shape(grads)?;
    accum.same_shape(grads)?;
    for ((v, p), &g) in accum
        .data_mut()
        .iter_mut()
        .zip(params.data_mut().iter_mut())
        .zip(grads.data())
    {
        *v = decay * *v + (1.0 - decay) * g * g;
        *p -= lr * g / (*v + eps).sqrt();
    }
    ensure_finite(params, "rmsprop_step")
}

fn ensure_finite(t: &Tensor, op: &'static str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(KernelError::NonFinite(op))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    RmsProp { decay: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn rmsprop() -> Self {
        OptimizerKind::RmsProp {
            decay: RMSPROP_DECAY,
            eps: RMSPROP_EPS,
        }
    }
}

/// Optimizer with per-parameter accumulators (RMSprop only).
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr: f64,
    accum: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            accum: Vec::new(),
        }
    }

    pub fn accumulators(&self) -> &[Tensor] {
        &self.accum
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return shape_err(format!(
                "{} parameter tensors but {} gradients",
                params.len(),
                grads.len()
            ));
        }
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.into_iter().zip(grads) {
                    sgd_step(p, g, self.lr)?;
                }
            }
            OptimizerKind::RmsProp { decay, eps } => {
                if self.accum.is_empty() {
                    self.accum = grads.iter().map(|g| Tensor::zeros(g.dims())).collect();
                }
                for ((p, g), v) in params.into_iter().zip(grads).zip(self.accum.iter_mut()) {
                    rmsprop_step(v, p, g, self.lr, decay, eps)?;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::vector(v.to_vec()).unwrap()
    }

    #[test]
    fn sgd_arithmetic() {
        let mut p = t(&[0.0, 0.0]);
        sgd_step(&mut p, &t(&[1.0, 1.0]), 0.05).unwrap();
        assert_eq!(p, t(&[-0.05, -0.05]));
        let before = p.clone();
        sgd_step(&mut p, &t(&[3.0, -2.0]), 0.0).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn sgd_two_steps_equal_one_summed_step() {
        let (g1, g2) = (t(&[0.3, -1.2]), t(&[0.7, 0.4]));
        let mut a = t(&[1.0, 2.0]);
        sgd_step(&mut a, &g1, 0.1).unwrap();
        sgd_step(&mut a, &g2, 0.1).unwrap();
        let mut b = t(&[1.0, 2.0]);
        sgd_step(&mut b, &g1.add(&g2).unwrap(), 0.1).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn rmsprop_zero_gradient_decays_accumulator_only() {
        let mut v = t(&[1.0, 4.0]);
        let mut p = t(&[0.5, -0.5]);
        rmsprop_step(&mut v, &mut p, &t(&[0.0, 0.0]), 0.01, 0.9, 1e-8).unwrap();
        assert_eq!(p, t(&[0.5, -0.5]));
        assert!((v.data()[0] - 0.9).abs() < 1e-15 && (v.data()[1] - 3.6).abs() < 1e-15);
    }

    #[test]
    fn rmsprop_constant_gradient_step_tends_to_lr_sign() {
        // Fixed point v -> g^2, so |step| -> lr * |g| / sqrt(g^2 + eps) ~ lr.
        let mut v = t(&[0.0, 0.0]);
        let mut p = t(&[0.0, 0.0]);
        let g = t(&[2.5, -0.3]);
        let mut prev = p.clone();
        for _ in 0..400 {
            prev = p.clone();
            rmsprop_step(&mut v, &mut p, &g, 0.01, 0.9, 1e-8).unwrap();
        }
        let step = p.sub(&prev).unwrap();
        assert!((step.data()[0] + 0.01).abs() < 1e-9);
        assert!((step.data()[1] - 0.01).abs() < 1e-8);
    }
}
