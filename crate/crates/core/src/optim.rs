//! Adam optimizer with the training recipe's default hyperparameters.
//!
//! The defaults are the tuned values the whole training recipe depends on:
//! learning rate 0.0002 and beta1 0.5 (the usual 0.9 makes adversarial
//! training oscillate).

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.0002,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam state: first/second moment estimates per parameter, and the shared
/// step counter driving bias correction.
#[derive(Debug, Clone)]
pub struct Adam<S: Scalar> {
    pub cfg: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
}

impl<S: Scalar> Adam<S> {
    /// Fresh zeroed state shaped like `params`.
    pub fn new(cfg: AdamConfig, params: &[Tensor<S>]) -> Adam<S> {
        Adam {
            cfg,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    /// One update. `params[i]` moves along `grads[i]`; the slices must match
    /// the construction-time layout exactly.
    pub fn step(&mut self, params: &mut [Tensor<S>], grads: &[Tensor<S>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::config(format!(
                "optimizer built for {} parameters, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let b1 = S::from_f64(self.cfg.beta1);
        let b2 = S::from_f64(self.cfg.beta2);
        let one_m_b1 = S::from_f64(1.0 - self.cfg.beta1);
        let one_m_b2 = S::from_f64(1.0 - self.cfg.beta2);
        // bias correction folded into a single step-size scale for m̂, and a
        // divisor for v̂, both computed in f64
        let corr1 = 1.0 - self.cfg.beta1.powi(t);
        let corr2 = 1.0 - self.cfg.beta2.powi(t);
        let lr_t = S::from_f64(self.cfg.lr / corr1);
        let inv_corr2 = S::from_f64(1.0 / corr2);
        let eps = S::from_f64(self.cfg.eps);

        for i in 0..params.len() {
            if params[i].shape() != self.m[i].shape() || grads[i].shape() != self.m[i].shape() {
                return Err(Error::shape(format!(
                    "parameter {i}: optimizer state {:?}, param {:?}, grad {:?}",
                    self.m[i].shape(),
                    params[i].shape(),
                    grads[i].shape()
                )));
            }
            if !grads[i].all_finite() {
                return Err(Error::numeric(format!(
                    "non-finite gradient for parameter {i} at optimizer step {}",
                    self.step
                )));
            }
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params[i].data_mut();
            for j in 0..g.len() {
                m[j] = b1 * m[j] + one_m_b1 * g[j];
                v[j] = b2 * v[j] + one_m_b2 * g[j] * g[j];
                let vhat = v[j] * inv_corr2;
                p[j] = p[j] - lr_t * m[j] / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_recipe() {
        let cfg = AdamConfig::default();
        assert_eq!(cfg.lr, 0.0002);
        assert_eq!(cfg.beta1, 0.5);
        assert_eq!(cfg.beta2, 0.999);
        assert_eq!(cfg.eps, 1e-8);
    }

    #[test]
    fn scalar_updates_match_a_hand_computation() {
        // One scalar parameter, constant gradient 0.5, lr 0.1, betas 0.5/0.9.
        // Step 1: m = 0.25, v = 0.025, m̂ = 0.5, v̂ = 0.25,
        //         update = 0.1 * 0.5 / (0.5 + 1e-8)
        // Step 2: m = 0.375, v = 0.0475, m̂ = 0.5, v̂ = 0.25, same update.
        let cfg = AdamConfig {
            lr: 0.1,
            beta1: 0.5,
            beta2: 0.9,
            eps: 1e-8,
        };
        let mut params = vec![Tensor::<f64>::scalar(1.0)];
        let grads = vec![Tensor::<f64>::scalar(0.5)];
        let mut opt = Adam::new(cfg, &params);

        opt.step(&mut params, &grads).unwrap();
        let upd = 0.1 * 0.5 / (0.25f64.sqrt() + 1e-8);
        assert!((params[0].data()[0] - (1.0 - upd)).abs() < 1e-15);
        assert!((opt.m[0].data()[0] - 0.25).abs() < 1e-15);
        assert!((opt.v[0].data()[0] - 0.025).abs() < 1e-15);

        opt.step(&mut params, &grads).unwrap();
        assert!((params[0].data()[0] - (1.0 - 2.0 * upd)).abs() < 1e-14);
        assert!((opt.m[0].data()[0] - 0.375).abs() < 1e-15);
        assert!((opt.v[0].data()[0] - 0.0475).abs() < 1e-15);
    }

    #[test]
    fn bias_correction_makes_the_first_step_full_size() {
        // With a tiny raw moment (m = (1-b1) g) the corrected first step
        // should be ~lr in magnitude regardless of gradient scale.
        let cfg = AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        };
        for scale in [1e-4, 1.0, 1e4] {
            let mut params = vec![Tensor::<f64>::scalar(0.0)];
            let grads = vec![Tensor::<f64>::scalar(scale)];
            let mut opt = Adam::new(cfg, &params);
            opt.step(&mut params, &grads).unwrap();
            let step = params[0].data()[0].abs();
            assert!(
                (step - cfg.lr).abs() / cfg.lr < 1e-3,
                "scale {scale}: step {step}"
            );
        }
    }

    #[test]
    fn zero_gradients_leave_fresh_parameters_fixed() {
        let mut params = vec![Tensor::<f64>::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap()];
        let grads = vec![Tensor::<f64>::zeros(&[3])];
        let mut opt = Adam::new(AdamConfig::default(), &params);
        for _ in 0..5 {
            opt.step(&mut params, &grads).unwrap();
        }
        assert_eq!(params[0].data(), &[1.0, -2.0, 0.5]);
        assert_eq!(opt.step, 5);
    }

    #[test]
    fn ten_steps_on_a_quadratic_match_a_scalar_reference() {
        // Independent reference: the update equations written out directly
        // over plain f64 locals, gradient of f(p) = p^2.
        let cfg = AdamConfig::default();
        let (mut m, mut v, mut p_ref) = (0.0f64, 0.0f64, 1.0f64);
        let mut expect = Vec::new();
        for t in 1..=10 {
            let g = 2.0 * p_ref;
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let mhat = m / (1.0 - cfg.beta1.powi(t));
            let vhat = v / (1.0 - cfg.beta2.powi(t));
            p_ref -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            expect.push(p_ref);
        }

        let mut params = vec![Tensor::<f64>::scalar(1.0)];
        let mut opt = Adam::new(cfg, &params);
        for want in expect {
            let g = 2.0 * params[0].data()[0];
            let grads = vec![Tensor::<f64>::scalar(g)];
            opt.step(&mut params, &grads).unwrap();
            assert!((params[0].data()[0] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_gradients_abort() {
        let mut params = vec![Tensor::<f32>::scalar(1.0)];
        let mut opt = Adam::new(AdamConfig::default(), &params);
        let grads = vec![Tensor::<f32>::scalar(f32::NAN)];
        let err = opt.step(&mut params, &grads).unwrap_err().to_string();
        assert!(err.contains("non-finite"), "{err}");
    }

    #[test]
    fn minimizes_a_quadratic() {
        let cfg = AdamConfig {
            lr: 0.05,
            ..AdamConfig::default()
        };
        let mut params = vec![Tensor::<f32>::scalar(-2.0)];
        let mut opt = Adam::new(cfg, &params);
        for _ in 0..500 {
            let x = params[0].data()[0];
            let grads = vec![Tensor::<f32>::scalar(2.0 * (x - 3.0))];
            opt.step(&mut params, &grads).unwrap();
        }
        assert!((params[0].data()[0] - 3.0).abs() < 1e-2);
    }

    #[test]
    fn rejects_mismatched_layouts() {
        let mut params = vec![Tensor::<f32>::zeros(&[2, 2])];
        let mut opt = Adam::new(AdamConfig::default(), &params);
        assert!(opt.step(&mut params, &[]).is_err());
        let bad = vec![Tensor::<f32>::zeros(&[3])];
        assert!(opt.step(&mut params, &bad).is_err());
    }
}
