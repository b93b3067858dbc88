//! Neural-network layer kernels on top of the autodiff tape.
//!
//! Convolutions live in [`conv`], pooling in [`pool`], batch normalization in
//! [`norm`], and losses in [`loss`]. Dropout is small enough to live here.

pub mod conv;
pub mod loss;
pub mod norm;
pub mod pool;

pub use conv::{conv2d, conv2d_transpose, conv_output_dim, transpose_output_dim};
pub use loss::{bce, mse, BCE_EPS};
pub use norm::{batchnorm, BatchNormState, BnBatchStats};
pub use pool::{maxpool2d, maxpool_to_grid};

use crate::error::Result;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Whether a forward pass uses batch statistics and noise (training) or
/// running statistics and no noise (evaluation).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Inverted dropout. In training, each element is zeroed with probability
/// `rate` and survivors are scaled by 1/(1-rate), so evaluation is the
/// identity and consumes no randomness.
pub fn dropout<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    rate: f64,
    mode: Mode,
    rng: &mut Rng,
) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(crate::error::Error::config(format!(
            "dropout rate must be in [0, 1), got {rate}"
        )));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(x);
    }
    let keep_scale = S::from_f64(1.0 / (1.0 - rate));
    let mut mask = Tensor::zeros(tape.value(x).shape());
    for m in mask.data_mut() {
        *m = if rng.next_f64() < rate {
            S::ZERO
        } else {
            keep_scale
        };
    }
    let mask = tape.constant(mask);
    tape.mul(x, mask)
}
