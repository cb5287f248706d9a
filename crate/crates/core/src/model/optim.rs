//! Gradient-descent updates over named parameter tensors: an adaptive
//! (Adam-style) rule with bias-corrected moment estimates, and plain SGD.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::GradSet;

/// Which update rule to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    /// Adaptive moments with bias correction.
    Adam,
    /// Plain stochastic gradient descent.
    Sgd,
}

/// Update-rule settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    /// Update rule.
    pub kind: OptimizerKind,
    /// Learning rate.
    pub lr: f64,
    /// First-moment decay (Adam only).
    pub beta1: f64,
    /// Second-moment decay (Adam only).
    pub beta2: f64,
    /// Denominator stabilizer (Adam only).
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            kind: OptimizerKind::Adam,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimConfig {
    /// Rejects rates/decays outside their valid ranges.
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be finite and >= 0, got {}",
                self.lr
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must lie in [0, 1), got {b}"
                )));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "eps must be positive, got {}",
                self.eps
            )));
        }
        Ok(())
    }
}

/// Per-tensor moment buffers and the shared step counter.
#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: OptimConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Optimizer {
    /// Fresh state for tensors shaped like `shapes`.
    pub fn new(cfg: OptimConfig, shapes: &[(&'static str, &[f64])]) -> Result<Self> {
        cfg.validate()?;
        Ok(Optimizer {
            cfg,
            m: shapes.iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
            v: shapes.iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
            step: 0,
        })
    }

    /// Updates applied so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update in place; `params` and `grads` must both follow
    /// the parameter set's `named_tensors` order.
    pub fn apply(&mut self, params: &mut [(&'static str, &mut [f64])], grads: &GradSet) -> Result<()> {
        if params.len() != grads.by_tensor.len() || params.len() != self.m.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer built for {} tensors, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.by_tensor.len()
            )));
        }
        if grads
            .by_tensor
            .iter()
            .any(|t| t.iter().any(|g| !g.is_finite()))
        {
            return Err(Error::Numerical(
                "non-finite gradient entry; refusing to update".into(),
            ));
        }
        self.step += 1;
        match self.cfg.kind {
            OptimizerKind::Sgd => {
                for ((_, p), g) in params.iter_mut().zip(&grads.by_tensor) {
                    for (x, &gi) in p.iter_mut().zip(g) {
                        *x -= self.cfg.lr * gi;
                    }
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
                let bc1 = 1.0 - b1.powi(self.step as i32);
                let bc2 = 1.0 - b2.powi(self.step as i32);
                for (ti, ((_, p), g)) in params.iter_mut().zip(&grads.by_tensor).enumerate() {
                    let (m, v) = (&mut self.m[ti], &mut self.v[ti]);
                    for i in 0..p.len() {
                        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                        let mhat = m[i] / bc1;
                        let vhat = v[i] / bc2;
                        p[i] -= self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_grad(x: &[f64]) -> GradSet {
        // d/dx of sum((x - 3)^2) per coordinate.
        GradSet {
            by_tensor: vec![x.iter().map(|&xi| 2.0 * (xi - 3.0)).collect()],
        }
    }

    #[test]
    fn sgd_takes_the_textbook_step() {
        let mut x = vec![1.0, -2.0];
        let shapes_holder = x.clone();
        let shapes: Vec<(&'static str, &[f64])> = vec![("x", &shapes_holder)];
        let mut opt = Optimizer::new(
            OptimConfig {
                kind: OptimizerKind::Sgd,
                lr: 0.1,
                ..OptimConfig::default()
            },
            &shapes,
        )
        .unwrap();
        let g = quadratic_grad(&x);
        opt.apply(&mut [("x", &mut x)], &g).unwrap();
        // x - 0.1 * 2(x-3)
        assert!((x[0] - (1.0 - 0.1 * -4.0)).abs() < 1e-15);
        assert!((x[1] - (-2.0 - 0.1 * -10.0)).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_lr_regardless_of_scale() {
        // With bias correction, |first step| = lr / (1 + eps/|g|) ~ lr.
        let mut x = vec![10.0, -50.0];
        let holder = x.clone();
        let shapes: Vec<(&'static str, &[f64])> = vec![("x", &holder)];
        let mut opt = Optimizer::new(OptimConfig::default(), &shapes).unwrap();
        let g = quadratic_grad(&x);
        let before = x.clone();
        opt.apply(&mut [("x", &mut x)], &g).unwrap();
        for (b, a) in before.iter().zip(&x) {
            assert!(((b - a).abs() - 1e-3).abs() < 1e-6);
        }
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn adam_converges_on_a_quadratic() {
        let mut x = vec![1.0, -2.0, 7.0];
        let holder = x.clone();
        let shapes: Vec<(&'static str, &[f64])> = vec![("x", &holder)];
        let mut opt = Optimizer::new(
            OptimConfig {
                lr: 0.05,
                ..OptimConfig::default()
            },
            &shapes,
        )
        .unwrap();
        for _ in 0..2000 {
            let g = quadratic_grad(&x);
            opt.apply(&mut [("x", &mut x)], &g).unwrap();
        }
        for xi in &x {
            assert!((xi - 3.0).abs() < 1e-3, "did not converge: {xi}");
        }
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let mut x = vec![0.4, 0.6];
        let holder = x.clone();
        let shapes: Vec<(&'static str, &[f64])> = vec![("x", &holder)];
        let mut opt = Optimizer::new(
            OptimConfig {
                lr: 0.0,
                ..OptimConfig::default()
            },
            &shapes,
        )
        .unwrap();
        let g = quadratic_grad(&x);
        opt.apply(&mut [("x", &mut x)], &g).unwrap();
        assert_eq!(x, holder);
    }

    #[test]
    fn non_finite_gradients_are_refused() {
        let mut x = vec![1.0];
        let holder = x.clone();
        let shapes: Vec<(&'static str, &[f64])> = vec![("x", &holder)];
        let mut opt = Optimizer::new(OptimConfig::default(), &shapes).unwrap();
        let g = GradSet {
            by_tensor: vec![vec![f64::NAN]],
        };
        let err = opt.apply(&mut [("x", &mut x)], &g).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)));
        assert_eq!(x, vec![1.0]);
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn bad_configs_are_rejected() {
        let holder = [0.0f64; 1];
        let shapes: Vec<(&'static str, &[f64])> = vec![("x", &holder)];
        for cfg in [
            OptimConfig {
                lr: f64::NAN,
                ..OptimConfig::default()
            },
            OptimConfig {
                beta1: 1.0,
                ..OptimConfig::default()
            },
            OptimConfig {
                eps: 0.0,
                ..OptimConfig::default()
            },
        ] {
            assert!(Optimizer::new(cfg, &shapes).is_err());
        }
    }
}
