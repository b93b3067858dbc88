//! Batch normalization.
//!
//! The forward pass is composed from tape primitives (per-channel mean,
//! broadcast subtract, variance, rsqrt scaling), so backpropagation through
//! the batch statistics falls out of the tape with no hand-derived batchnorm
//! gradient to maintain.
//!
//! Training mode normalizes by batch statistics and reports them to the
//! caller, which folds them into the running estimates; evaluation mode
//! normalizes by the stored running statistics. The affine scale and shift
//! are optional because the conditional-evaluation protocol trains models
//! with them removed.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

use super::Mode;

/// Running statistics carried between steps, one entry per channel.
#[derive(Debug, Clone)]
pub struct BatchNormState<S: Scalar> {
    pub running_mean: Tensor<S>,
    pub running_var: Tensor<S>,
}

impl<S: Scalar> BatchNormState<S> {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], S::ONE),
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// Folds one batch's statistics into the running estimates:
    /// `running = (1-momentum) * running + momentum * batch`. The variance
    /// uses the unbiased estimate, matching common framework semantics so
    /// evaluation behaves identically after loading elsewhere-trained
    /// weights.
    pub fn update(&mut self, batch: &BnBatchStats<S>, momentum: f64) {
        let m = S::from_f64(momentum);
        let keep = S::from_f64(1.0 - momentum);
        let count = batch.count as f64;
        let correction = S::from_f64(if count > 1.0 { count / (count - 1.0) } else { 1.0 });
        for (r, &b) in self
            .running_mean
            .data_mut()
            .iter_mut()
            .zip(batch.mean.data())
        {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self
            .running_var
            .data_mut()
            .iter_mut()
            .zip(batch.var.data())
        {
            *r = keep * *r + m * b * correction;
        }
    }
}

/// Statistics of one training-mode forward pass.
#[derive(Debug, Clone)]
pub struct BnBatchStats<S: Scalar> {
    pub mean: Tensor<S>,
    /// Biased (divide by count) variance, as used for the normalization.
    pub var: Tensor<S>,
    /// Elements reduced per channel.
    pub count: usize,
}

/// Normalizes `x` per channel (axis 1). Returns the output and, in training
/// mode, the batch statistics for the caller to fold into `state`.
pub fn batchnorm<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    gamma: Option<Var>,
    beta: Option<Var>,
    state: &BatchNormState<S>,
    mode: Mode,
    eps: f64,
) -> Result<(Var, Option<BnBatchStats<S>>)> {
    let shape = tape.value(x).shape().to_vec();
    if shape.len() < 2 {
        return Err(Error::shape(format!(
            "batchnorm needs rank >= 2, got {shape:?}"
        )));
    }
    if state.channels() != shape[1] {
        return Err(Error::shape(format!(
            "batchnorm state has {} channels, input {:?}",
            state.channels(),
            shape
        )));
    }
    if gamma.is_some() != beta.is_some() {
        return Err(Error::config(
            "batchnorm affine parameters must be both present or both absent",
        ));
    }

    let (normalized, stats) = match mode {
        Mode::Train => {
            let mean = tape.mean_dim1(x)?;
            let neg_mean = tape.neg(mean);
            let centered = tape.add_dim1(x, neg_mean)?;
            let sq = tape.mul(centered, centered)?;
            let var = tape.mean_dim1(sq)?;
            let var_eps = tape.add_scalar(var, eps);
            let std = tape.sqrt(var_eps);
            let inv_std = tape.recip(std);
            let normalized = tape.mul_dim1(centered, inv_std)?;
            let count = tape.value(x).len() / shape[1];
            let stats = BnBatchStats {
                mean: tape.value(mean).clone(),
                var: tape.value(var).clone(),
                count,
            };
            (normalized, Some(stats))
        }
        Mode::Eval => {
            let neg_mean = tape.constant(state.running_mean.map(|v| -v));
            let inv_std = tape.constant(
                state
                    .running_var
                    .map(|v| S::ONE / (v + S::from_f64(eps)).sqrt()),
            );
            let centered = tape.add_dim1(x, neg_mean)?;
            (tape.mul_dim1(centered, inv_std)?, None)
        }
    };

    let out = match (gamma, beta) {
        (Some(g), Some(b)) => {
            let scaled = tape.mul_dim1(normalized, g)?;
            tape.add_dim1(scaled, b)?
        }
        _ => normalized,
    };
    Ok((out, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tape::grad_check;

    fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut t = Tensor::zeros(shape);
        Rng::from_seed(seed).fill_normal(t.data_mut(), 1.5, 2.0);
        t
    }

    #[test]
    fn train_output_is_standardized_per_channel() {
        let mut tape = Tape::new();
        let x = tape.constant(randn(&[4, 3, 5, 5], 1));
        let state = BatchNormState::new(3);
        let (y, stats) = batchnorm(&mut tape, x, None, None, &state, Mode::Train, 1e-5).unwrap();
        let stats = stats.unwrap();
        assert_eq!(stats.count, 4 * 5 * 5);

        let out = tape.value(y).clone();
        let mean = out.mean_dim1().unwrap();
        for &m in mean.data() {
            assert!(m.abs() < 1e-10, "channel mean {m}");
        }
        let sq = out.mul(&out).unwrap();
        for &v in sq.mean_dim1().unwrap().data() {
            assert!((v - 1.0).abs() < 1e-3, "channel var {v}");
        }
    }

    #[test]
    fn affine_scale_and_shift_apply_after_normalization() {
        let mut tape = Tape::new();
        let x = tape.constant(randn(&[2, 2, 3, 3], 2));
        let gamma = tape.constant(Tensor::from_vec(&[2], vec![2.0, 0.5]).unwrap());
        let beta = tape.constant(Tensor::from_vec(&[2], vec![10.0, -1.0]).unwrap());
        let state = BatchNormState::new(2);
        let (y, _) =
            batchnorm(&mut tape, x, Some(gamma), Some(beta), &state, Mode::Train, 1e-5).unwrap();
        let mean = tape.value(y).mean_dim1().unwrap();
        assert!((mean.data()[0] - 10.0).abs() < 1e-9);
        assert!((mean.data()[1] + 1.0).abs() < 1e-9);
    }

    #[test]
    fn eval_uses_running_statistics() {
        let mut state = BatchNormState::new(1);
        state.running_mean = Tensor::from_vec(&[1], vec![4.0]).unwrap();
        state.running_var = Tensor::from_vec(&[1], vec![9.0]).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(&[1, 1, 1, 2], vec![4.0, 7.0]).unwrap());
        let (y, stats) = batchnorm(&mut tape, x, None, None, &state, Mode::Eval, 0.0).unwrap();
        assert!(stats.is_none());
        let out = tape.value(y).data().to_vec();
        assert!((out[0] - 0.0).abs() < 1e-12);
        assert!((out[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn running_update_blends_with_unbiased_variance() {
        let mut state = BatchNormState::<f64>::new(1);
        let stats = BnBatchStats {
            mean: Tensor::from_vec(&[1], vec![10.0]).unwrap(),
            var: Tensor::from_vec(&[1], vec![4.0]).unwrap(),
            count: 4,
        };
        state.update(&stats, 0.1);
        assert!((state.running_mean.data()[0] - 1.0).abs() < 1e-12);
        // biased 4.0 -> unbiased 4 * 4/3; blended: 0.9 * 1 + 0.1 * 16/3
        let want = 0.9 + 0.1 * (4.0 * 4.0 / 3.0);
        assert!((state.running_var.data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn gradients_flow_through_batch_statistics() {
        // The nonlinear readout amplifies truncation error, so it runs with
        // a smaller step than the default verification step.
        let state = BatchNormState::new(3);
        let report = grad_check(
            |tape, vars| {
                let (y, _) = batchnorm(
                    tape,
                    vars[0],
                    Some(vars[1]),
                    Some(vars[2]),
                    &state,
                    Mode::Train,
                    1e-5,
                )?;
                let sq = tape.mul(y, y)?;
                let t = tape.tanh(sq);
                Ok(tape.mean_all(t))
            },
            &[
                randn(&[3, 3, 4, 4], 5),
                randn(&[3], 6),
                randn(&[3], 7),
            ],
            1e-4,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn linear_readout_is_exact_at_the_default_step() {
        let state = BatchNormState::new(3);
        let w = randn(&[3, 3, 4, 4], 9);
        let report = grad_check(
            |tape, vars| {
                let (y, _) = batchnorm(
                    tape,
                    vars[0],
                    Some(vars[1]),
                    Some(vars[2]),
                    &state,
                    Mode::Train,
                    1e-5,
                )?;
                let wc = tape.constant(w.clone());
                let yw = tape.mul(y, wc)?;
                Ok(tape.mean_all(yw))
            },
            &[
                randn(&[3, 3, 4, 4], 5),
                randn(&[3], 6),
                randn(&[3], 7),
            ],
            1e-3,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn affine_free_gradients_also_check_out() {
        let state = BatchNormState::new(2);
        let report = grad_check(
            |tape, vars| {
                let (y, _) = batchnorm(tape, vars[0], None, None, &state, Mode::Train, 1e-5)?;
                let sq = tape.mul(y, y)?;
                Ok(tape.mean_all(sq))
            },
            &[randn(&[2, 2, 3, 3], 8)],
            1e-3,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn rank2_inputs_normalize_over_the_batch() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(&[4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let state = BatchNormState::new(1);
        let (y, stats) = batchnorm(&mut tape, x, None, None, &state, Mode::Train, 0.0).unwrap();
        let stats = stats.unwrap();
        assert_eq!(stats.count, 4);
        assert!((stats.mean.data()[0] - 2.5).abs() < 1e-12);
        assert!((stats.var.data()[0] - 1.25).abs() < 1e-12);
        let out = tape.value(y);
        assert!((out.data()[0] + 1.5 / 1.25f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn mismatched_affine_pair_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::zeros(&[2, 2, 2, 2]));
        let g = tape.constant(Tensor::<f64>::full(&[2], 1.0));
        let state = BatchNormState::new(2);
        assert!(batchnorm(&mut tape, x, Some(g), None, &state, Mode::Train, 1e-5).is_err());
    }
}
