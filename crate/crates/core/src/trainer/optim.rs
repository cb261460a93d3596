//! SGD with momentum and a warmup-then-inverse-sqrt learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    /// Peak learning rate, reached at the end of warmup.
    pub peak: f64,
    pub warmup_steps: u64,
}

impl LrSchedule {
    /// Linear ramp to `peak` over `warmup_steps`, then `peak * sqrt(warmup / step)`.
    /// Steps count from 1.
    pub fn rate(&self, step: u64) -> f64 {
        let step = step.max(1) as f64;
        let warm = self.warmup_steps.max(1) as f64;
        self.peak * (step / warm).min((warm / step).sqrt())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.peak > 0.0 && self.peak.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.peak)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Sgd<T> {
    momentum: T,
    velocity: Vec<T>,
    step: u64,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(param_count: usize, momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        Ok(Self {
            momentum: T::of(momentum),
            velocity: vec![T::zero(); param_count],
            step: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// `v = mu v + g; theta -= lr v`. Returns the rate used.
    pub fn step(&mut self, params: &mut [T], grad: &[T], schedule: &LrSchedule) -> f64 {
        self.step += 1;
        let lr = schedule.rate(self.step);
        let lr_t = T::of(lr);
        for ((p, v), &g) in params.iter_mut().zip(&mut self.velocity).zip(grad) {
            *v = self.momentum * *v + g;
            *p -= lr_t * *v;
        }
        lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let s = LrSchedule {
            peak: 0.4,
            warmup_steps: 100,
        };
        assert!((s.rate(50) - 0.2).abs() < 1e-12);
        assert!((s.rate(100) - 0.4).abs() < 1e-12);
        assert!((s.rate(400) - 0.2).abs() < 1e-12);
        assert!(s.rate(0) > 0.0);
    }

    #[test]
    fn momentum_accumulates() {
        let s = LrSchedule {
            peak: 1.0,
            warmup_steps: 1,
        };
        let mut opt = Sgd::<f64>::new(1, 0.5).unwrap();
        let mut p = vec![0.0];
        opt.step(&mut p, &[1.0], &s);
        assert_eq!(p[0], -1.0);
        opt.step(&mut p, &[1.0], &s);
        // v = 1.5, lr = sqrt(1/2)
        assert!((p[0] - (-1.0 - 1.5 * 0.5f64.sqrt())).abs() < 1e-12);
        assert!(Sgd::<f64>::new(1, 1.0).is_err());
    }
}
