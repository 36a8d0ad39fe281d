//! SGD with momentum and a cosine learning-rate schedule.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `base * (1 + cos(π step / total)) / 2`, reaching 0 after `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = step.min(total) as f64 / total as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Heavy-ball SGD. Velocity buffers are created lazily, one per parameter
/// slot, and only for the parameters handed to [`Sgd::step`].
#[derive(Clone, Debug)]
pub struct Sgd {
    momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: Vec::new(),
        }
    }

    /// `v = momentum * v + g; p -= lr * v` for every parameter. A missing
    /// gradient counts as zero. Nothing is modified if any gradient is
    /// non-finite or mis-shaped.
    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::dim("sgd", params.len(), grads.len()));
        }
        for (p, g) in params.iter().zip(grads) {
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(Error::dim("sgd", format!("{:?}", p.shape()), format!("{:?}", g.shape())));
                }
                if g.data().iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { op: "sgd" });
                }
            }
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        } else if self.velocity.len() != params.len() {
            return Err(Error::usage("sgd called with a different parameter list"));
        }
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            match g {
                Some(g) => v.iter_mut().zip(g.data()).for_each(|(v, g)| *v = self.momentum * *v + g),
                None => v.iter_mut().for_each(|v| *v *= self.momentum),
            }
            p.data_mut().iter_mut().zip(v.iter()).for_each(|(x, v)| *x -= lr * v);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        assert_eq!(cosine_lr(0.015, 0, 100), 0.015);
        assert!((cosine_lr(0.015, 50, 100) - 0.0075).abs() < 1e-15);
        assert!(cosine_lr(0.015, 100, 100).abs() < 1e-15);
        assert!(cosine_lr(0.015, 30, 100) > cosine_lr(0.015, 31, 100));
    }

    #[test]
    fn momentum_update() {
        let mut p = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let g = Tensor::vector(vec![1.0, -1.0]).unwrap();
        let mut opt = Sgd::new(0.9);
        opt.step(vec![&mut p], &[Some(g.clone())], 0.1).unwrap();
        assert_eq!(p.data(), &[0.9, 2.1]);
        opt.step(vec![&mut p], &[Some(g)], 0.1).unwrap();
        // v = 0.9 * 1 + 1 = 1.9
        assert!((p.data()[0] - (0.9 - 0.19)).abs() < 1e-15);
        let before = p.clone();
        let bad = Tensor::vector(vec![1.0, 0.0]).unwrap();
        let mut bad_data = bad.clone();
        bad_data.data_mut()[1] = f64::NAN;
        assert!(opt.step(vec![&mut p], &[Some(bad_data)], 0.1).is_err());
        assert_eq!(p, before);
    }
}
