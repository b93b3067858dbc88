//! Losses.
//!
//! Binary cross-entropy clamps probabilities away from {0, 1} before the
//! logs, so a saturated discriminator yields a large finite loss instead of
//! an infinity that would poison the whole run.

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

/// Probability clamp for [`bce`]: inputs are squeezed into
/// [BCE_EPS, 1 - BCE_EPS].
pub const BCE_EPS: f64 = 1e-7;

/// Mean binary cross-entropy between probabilities `p` and targets `t`:
/// `-mean(t*ln(p) + (1-t)*ln(1-p))`.
pub fn bce<S: Scalar>(tape: &mut Tape<S>, p: Var, t: Var) -> Result<Var> {
    let lo = tape.max_scalar(p, BCE_EPS);
    let pc = tape.min_scalar(lo, 1.0 - BCE_EPS);

    let ln_p = tape.ln(pc);
    let pos = tape.mul(t, ln_p)?;

    let neg_p = tape.neg(pc);
    let one_minus_p = tape.add_scalar(neg_p, 1.0);
    let ln_q = tape.ln(one_minus_p);
    let neg_t = tape.neg(t);
    let one_minus_t = tape.add_scalar(neg_t, 1.0);
    let negpart = tape.mul(one_minus_t, ln_q)?;

    let sum = tape.add(pos, negpart)?;
    let mean = tape.mean_all(sum);
    Ok(tape.neg(mean))
}

/// Mean squared error between `a` and `b`.
pub fn mse<S: Scalar>(tape: &mut Tape<S>, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean_all(sq))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tape::grad_check;
    use crate::tensor::Tensor;

    #[test]
    fn bce_matches_the_closed_form() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::from_vec(&[3], vec![0.9f64, 0.2, 0.5]).unwrap());
        let t = tape.constant(Tensor::from_vec(&[3], vec![1.0f64, 0.0, 1.0]).unwrap());
        let loss = bce(&mut tape, p, t).unwrap();
        let want = -((0.9f64.ln()) + (0.8f64.ln()) + (0.5f64.ln())) / 3.0;
        let got = tape.value(loss).data()[0];
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn bce_is_finite_at_saturated_probabilities() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::from_vec(&[2], vec![0.0f32, 1.0]).unwrap());
        let t = tape.constant(Tensor::from_vec(&[2], vec![1.0f32, 0.0]).unwrap());
        let loss = bce(&mut tape, p, t).unwrap();
        let got = tape.value(loss).data()[0];
        assert!(got.is_finite());
        // Both entries are maximally wrong, so the loss sits near -ln(eps);
        // the f32 rounding of the upper clamp shifts it slightly.
        let want = -(BCE_EPS.ln()) as f32;
        assert!((got - want).abs() / want < 0.01, "{got} vs {want}");
    }

    #[test]
    fn bce_gradients_match_finite_differences() {
        let mut p = Tensor::zeros(&[8]);
        Rng::from_seed(4).fill_uniform(p.data_mut(), 0.05, 0.95);
        let mut t = Tensor::zeros(&[8]);
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v = (i % 2) as f64;
        }
        let report = grad_check(
            |tape, vars| {
                let tc = tape.constant(t.clone());
                bce(tape, vars[0], tc)
            },
            &[p],
            1e-4,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-7, "{report:?}");
    }

    #[test]
    fn mse_matches_the_closed_form_and_checks_out() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_vec(&[2], vec![1.0f64, 3.0]).unwrap());
        let b = tape.constant(Tensor::from_vec(&[2], vec![0.0f64, 1.0]).unwrap());
        let loss = mse(&mut tape, a, b).unwrap();
        assert!((tape.value(loss).data()[0] - 2.5).abs() < 1e-12);

        let mut x = Tensor::zeros(&[6]);
        Rng::from_seed(5).fill_normal(x.data_mut(), 0.0, 1.0);
        let target = {
            let mut t = Tensor::zeros(&[6]);
            Rng::from_seed(6).fill_normal(t.data_mut(), 0.0, 1.0);
            t
        };
        let report = grad_check(
            |tape, vars| {
                let tc = tape.constant(target.clone());
                mse(tape, vars[0], tc)
            },
            &[x],
            1e-4,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-9, "{report:?}");
    }
}
