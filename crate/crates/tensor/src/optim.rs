//! First-order optimizers keyed by parameter name.
//!
//! State buffers are looked up by name, so a parameter set may shrink
//! between steps (pruned candidates simply stop appearing).

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// One parameter together with its gradient for a single update.
pub struct ParamUpdate<'a> {
    pub name: &'a str,
    pub value: &'a mut Tensor,
    pub grad: &'a Tensor,
}

pub trait Optimizer {
    /// Applies one update. Every gradient is checked before any parameter
    /// is touched; a non-finite gradient rejects the whole step.
    fn step(&mut self, updates: &mut [ParamUpdate<'_>], lr: f64) -> Result<()>;

    /// Number of successful steps so far.
    fn steps(&self) -> u64;
}

fn validate(updates: &[ParamUpdate<'_>], lr: f64) -> Result<()> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(TensorError::Optimizer(format!(
            "learning rate must be positive, got {lr}"
        )));
    }
    for u in updates {
        if u.value.shape() != u.grad.shape() {
            return Err(TensorError::Optimizer(format!(
                "`{}`: parameter {:?} vs gradient {:?}",
                u.name,
                u.value.shape(),
                u.grad.shape()
            )));
        }
        if !u.grad.is_finite() {
            return Err(TensorError::NonFiniteGradient(u.name.to_string()));
        }
    }
    Ok(())
}

/// Heavy-ball SGD: `v <- mu v + g + wd w`, `w <- w - lr v`.
#[derive(Clone, Debug)]
pub struct MomentumSgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Tensor>,
    steps: u64,
}

impl MomentumSgd {
    pub fn new(momentum: f64) -> Self {
        MomentumSgd {
            momentum,
            weight_decay: 0.0,
            velocity: BTreeMap::new(),
            steps: 0,
        }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    pub fn velocity(&self, name: &str) -> Option<&Tensor> {
        self.velocity.get(name)
    }
}

impl Default for MomentumSgd {
    fn default() -> Self {
        MomentumSgd::new(0.9)
    }
}

impl Optimizer for MomentumSgd {
    fn step(&mut self, updates: &mut [ParamUpdate<'_>], lr: f64) -> Result<()> {
        validate(updates, lr)?;
        for u in updates.iter_mut() {
            let v = self
                .velocity
                .entry(u.name.to_string())
                .or_insert_with(|| Tensor::zeros(u.value.shape()));
            if v.shape() != u.value.shape() {
                *v = Tensor::zeros(u.value.shape());
            }
            let w = u.value.data_mut();
            for ((vi, gi), wi) in v.data_mut().iter_mut().zip(u.grad.data()).zip(w.iter_mut()) {
                *vi = self.momentum * *vi + gi + self.weight_decay * *wi;
                *wi -= lr * *vi;
            }
        }
        self.steps += 1;
        Ok(())
    }

    fn steps(&self) -> u64 {
        self.steps
    }
}

/// Adaptive moment estimation with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
    steps: u64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam::new(0.9, 0.999, 1e-8)
    }
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            moments: BTreeMap::new(),
            steps: 0,
        }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, updates: &mut [ParamUpdate<'_>], lr: f64) -> Result<()> {
        validate(updates, lr)?;
        let t = (self.steps + 1) as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for u in updates.iter_mut() {
            let (m, v) = self
                .moments
                .entry(u.name.to_string())
                .or_insert_with(|| (Tensor::zeros(u.value.shape()), Tensor::zeros(u.value.shape())));
            if m.shape() != u.value.shape() {
                *m = Tensor::zeros(u.value.shape());
                *v = Tensor::zeros(u.value.shape());
            }
            let w = u.value.data_mut();
            for (((mi, vi), gi), wi) in m
                .data_mut()
                .iter_mut()
                .zip(v.data_mut().iter_mut())
                .zip(u.grad.data())
                .zip(w.iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *wi -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        self.steps += 1;
        Ok(())
    }

    fn steps(&self) -> u64 {
        self.steps
    }
}

/// Learning-rate schedule over a known number of steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LrSchedule {
    Constant(f64),
    /// Half-cosine decay from `base` to zero over `total` steps.
    Cosine {
        base: f64,
        total: u64,
    },
}

impl LrSchedule {
    pub fn at(&self, step: u64) -> f64 {
        match *self {
            LrSchedule::Constant(lr) => lr,
            LrSchedule::Cosine { base, total } => {
                if total == 0 {
                    return base;
                }
                let t = (step.min(total) as f64) / total as f64;
                // never hand a zero rate to the optimizer
                (0.5 * base * (1.0 + (PI * t).cos())).max(base * 1e-4)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_step<O: Optimizer>(opt: &mut O, w: &mut Tensor, g: f64, lr: f64) -> Result<()> {
        let grad = Tensor::scalar(g);
        let mut ups = [ParamUpdate {
            name: "w",
            value: w,
            grad: &grad,
        }];
        opt.step(&mut ups, lr)
    }

    #[test]
    fn plain_sgd_step() {
        let mut opt = MomentumSgd::new(0.0);
        let mut w = Tensor::scalar(1.0);
        one_step(&mut opt, &mut w, 0.5, 0.1).unwrap();
        assert!((w.item() - 0.95).abs() < 1e-15);
    }

    #[test]
    fn momentum_accumulates() {
        let mut opt = MomentumSgd::new(0.9);
        let mut w = Tensor::scalar(0.0);
        one_step(&mut opt, &mut w, 1.0, 1.0).unwrap();
        assert_eq!(w.item(), -1.0);
        one_step(&mut opt, &mut w, 1.0, 1.0).unwrap();
        assert!((w.item() + 2.9).abs() < 1e-12);
        assert_eq!(opt.steps(), 2);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        // f(w) = (w - 3)^2, minimum at 3
        let mut opt = Adam::default();
        let mut w = Tensor::scalar(-2.0);
        let mut reached = None;
        for step in 0..500 {
            let g = 2.0 * (w.item() - 3.0);
            one_step(&mut opt, &mut w, g, 0.05).unwrap();
            if reached.is_none() && (w.item() - 3.0).abs() < 1e-3 {
                reached = Some(step);
            }
        }
        assert!((w.item() - 3.0).abs() < 1e-3, "ended at {}", w.item());
        assert!(reached.is_some());
    }

    #[test]
    fn nan_gradient_rejects_step() {
        let mut opt = MomentumSgd::default();
        let mut w = Tensor::scalar(1.0);
        let err = one_step(&mut opt, &mut w, f64::NAN, 0.1).unwrap_err();
        assert!(matches!(err, TensorError::NonFiniteGradient(_)));
        assert_eq!(w.item(), 1.0);
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn non_positive_lr_rejected() {
        let mut opt = Adam::default();
        let mut w = Tensor::scalar(1.0);
        assert!(one_step(&mut opt, &mut w, 1.0, 0.0).is_err());
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let s = LrSchedule::Cosine {
            base: 0.1,
            total: 100,
        };
        assert!((s.at(0) - 0.1).abs() < 1e-15);
        assert!((s.at(50) - 0.05).abs() < 1e-12);
        assert!(s.at(100) > 0.0 && s.at(100) < 1e-4);
    }
}
