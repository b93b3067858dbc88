//! Max pooling.
//!
//! Two uses: [`maxpool_to_grid`] reduces arbitrary feature maps onto a fixed
//! spatial grid for the discriminator-feature pipeline, and [`maxpool2d`] is
//! the classic windowed layer, present so pooling architectures can be built
//! and then rejected by the guideline validator while still computing honest
//! values and gradients.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Windowed max pooling without padding. Gradients route to the argmax of
/// each window; ties go to the first element in scan order.
pub fn maxpool2d<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    kernel: usize,
    stride: usize,
) -> Result<Var> {
    let xv = tape.value(x).clone();
    if xv.ndim() != 4 {
        return Err(Error::shape(format!(
            "maxpool2d needs a rank-4 input, got {:?}",
            xv.shape()
        )));
    }
    if kernel == 0 || stride == 0 {
        return Err(Error::config("maxpool2d kernel and stride must be positive"));
    }
    let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
    if h < kernel || w < kernel {
        return Err(Error::shape(format!(
            "maxpool2d window {kernel} exceeds input {h}x{w}"
        )));
    }
    let oh = (h - kernel) / stride + 1;
    let ow = (w - kernel) / stride + 1;

    let xd = xv.data();
    let mut out = vec![S::ZERO; n * c * oh * ow];
    // Flat input index of each output's winning element, for the backward
    // scatter.
    let mut argmax = vec![0usize; out.len()];
    for ni in 0..n {
        for ci in 0..c {
            let plane_base = (ni * c + ci) * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = None;
                    for u in 0..kernel {
                        for v in 0..kernel {
                            let idx = plane_base + (oy * stride + u) * w + (ox * stride + v);
                            let val = xd[idx];
                            match best {
                                None => best = Some((val, idx)),
                                Some((bv, _)) if val > bv => best = Some((val, idx)),
                                _ => {}
                            }
                        }
                    }
                    let (val, idx) = best.expect("window is non-empty");
                    let o = ((ni * c + ci) * oh + oy) * ow + ox;
                    out[o] = val;
                    argmax[o] = idx;
                }
            }
        }
    }

    let out = Tensor::from_vec(&[n, c, oh, ow], out)?;
    let xi = x.id();
    let in_shape = xv.shape().to_vec();
    Ok(tape.push_op(
        out,
        vec![xi],
        Box::new(move |gy| {
            let mut gx = Tensor::zeros(&in_shape);
            let gxd = gx.data_mut();
            for (g, &idx) in gy.data().iter().zip(&argmax) {
                gxd[idx] += *g;
            }
            vec![(xi, gx)]
        }),
    ))
}

/// Pools an `[n, c, h, w]` map onto an `[n, c, grid, grid]` summary with
/// non-overlapping windows. Requires `h` and `w` divisible by `grid`; maps
/// already at the grid size pass through a 1x1 pool unchanged.
pub fn maxpool_to_grid<S: Scalar>(tape: &mut Tape<S>, x: Var, grid: usize) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::shape(format!(
            "maxpool_to_grid needs a rank-4 input, got {shape:?}"
        )));
    }
    let (h, w) = (shape[2], shape[3]);
    if grid == 0 || h % grid != 0 || w % grid != 0 {
        return Err(Error::shape(format!(
            "cannot pool {h}x{w} onto a {grid}x{grid} grid"
        )));
    }
    if h / grid != w / grid {
        return Err(Error::shape(format!(
            "non-square pooling windows for {h}x{w} to {grid}"
        )));
    }
    maxpool2d(tape, x, h / grid, h / grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tape::grad_check;

    #[test]
    fn maxpool_picks_window_maxima() {
        let mut tape = Tape::new();
        let x = tape.constant(
            Tensor::from_vec(
                &[1, 1, 4, 4],
                vec![
                    1.0, 2.0, 5.0, 6.0, //
                    3.0, 4.0, 7.0, 8.0, //
                    9.0, 10.0, 13.0, 14.0, //
                    11.0, 12.0, 15.0, 16.0,
                ],
            )
            .unwrap(),
        );
        let y = maxpool2d(&mut tape, x, 2, 2).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 2, 2]);
        assert_eq!(tape.value(y).data(), &[4.0, 8.0, 12.0, 16.0]);
    }

    #[test]
    fn gradient_routes_to_the_argmax() {
        let mut tape = Tape::new();
        let x = tape.leaf(
            Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 9.0, 3.0, 2.0]).unwrap(),
            true,
        );
        let y = maxpool2d(&mut tape, x, 2, 2).unwrap();
        let loss = tape.sum_all(y);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn pooling_gradients_match_finite_differences() {
        // Distinct-valued input keeps the argmax stable under perturbation.
        let mut x = Tensor::zeros(&[2, 2, 6, 6]);
        let mut rng = Rng::from_seed(8);
        let mut vals: Vec<f64> = (0..x.len()).map(|i| i as f64 * 0.1).collect();
        rng.shuffle(&mut vals);
        x.data_mut().copy_from_slice(&vals);
        let report = grad_check(
            |tape, vars| {
                let y = maxpool2d(tape, vars[0], 2, 2)?;
                let sq = tape.mul(y, y)?;
                Ok(tape.mean_all(sq))
            },
            &[x],
            1e-3,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-9, "{report:?}");
    }

    #[test]
    fn grid_pool_handles_every_stage_size() {
        for &(h, c) in &[(32usize, 3usize), (16, 4), (8, 2), (4, 5)] {
            let mut tape = Tape::new();
            let mut t = Tensor::<f64>::zeros(&[2, c, h, h]);
            Rng::from_seed(h as u64).fill_normal(t.data_mut(), 0.0, 1.0);
            let x = tape.constant(t);
            let y = maxpool_to_grid(&mut tape, x, 4).unwrap();
            assert_eq!(tape.value(y).shape(), &[2, c, 4, 4]);
        }
    }

    #[test]
    fn grid_pool_at_grid_size_is_identity() {
        let mut tape = Tape::new();
        let mut t = Tensor::<f64>::zeros(&[1, 2, 4, 4]);
        Rng::from_seed(3).fill_normal(t.data_mut(), 0.0, 1.0);
        let x = tape.constant(t.clone());
        let y = maxpool_to_grid(&mut tape, x, 4).unwrap();
        assert_eq!(tape.value(y).data(), t.data());
    }

    #[test]
    fn grid_pool_rejects_indivisible_extents() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 6, 6]));
        assert!(maxpool_to_grid(&mut tape, x, 4).is_err());
    }
}
