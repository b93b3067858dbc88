//! Strided and fractionally-strided (transposed) 2D convolution.
//!
//! Both directions are lowered to matrix products through im2col/col2im, so
//! all the arithmetic runs in the blocked gemm from [`crate::tensor`].
//!
//! The transposed convolution is implemented as the exact linear adjoint of
//! the forward convolution: for one kernel tensor K and matching geometry,
//! `<conv2d(x, K), y> == <x, conv2d_transpose(y, K)>` holds to floating-point
//! accuracy. That identity is what makes the upsampling path of a generator
//! the mirror image of a discriminator's downsampling path, and it is pinned
//! by tests below over a grid of shapes.
//!
//! Kernel layout is `[conv_out, conv_in, kh, kw]`. A transposed convolution
//! taking `cin` channels to `cout` channels therefore stores its kernel as
//! `[cin, cout, kh, kw]`: the same tensor read from the other side.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Output extent of a strided convolution along one axis (floor division).
pub fn conv_output_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::config("stride must be positive"));
    }
    let padded = input + 2 * pad;
    if padded < kernel {
        return Err(Error::shape(format!(
            "kernel {kernel} larger than padded input {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Output extent of a transposed convolution along one axis.
pub fn transpose_output_dim(
    input: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Result<usize> {
    if stride == 0 {
        return Err(Error::config("stride must be positive"));
    }
    if out_pad >= stride {
        return Err(Error::config(format!(
            "output padding {out_pad} must be smaller than stride {stride}"
        )));
    }
    let grown = (input - 1) * stride + kernel + out_pad;
    if grown < 2 * pad + 1 {
        return Err(Error::shape(format!(
            "padding {pad} swallows the whole {grown}-wide output"
        )));
    }
    Ok(grown - 2 * pad)
}

/// Geometry of one convolution: `[n, cin, h, w] -> [n, cout, oh, ow]`.
#[derive(Debug, Clone, Copy)]
struct Geom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geom {
    fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn col_width(&self) -> usize {
        self.n * self.oh * self.ow
    }
}

/// Unfolds input patches into a `[cin*kh*kw, n*oh*ow]` matrix. Out-of-bounds
/// (padding) positions stay zero.
fn im2col<S: Scalar>(x: &[S], g: &Geom) -> Tensor<S> {
    let width = g.col_width();
    let mut cols = vec![S::ZERO; g.col_rows() * width];
    let (s, p) = (g.stride, g.pad as isize);
    for c in 0..g.cin {
        for u in 0..g.kh {
            for v in 0..g.kw {
                let row_base = ((c * g.kh + u) * g.kw + v) * width;
                // Valid output columns satisfy 0 <= ow*s + v - p < w.
                let off = v as isize - p;
                let ow_lo = if off >= 0 {
                    0
                } else {
                    ((-off) as usize).div_ceil(s)
                };
                let hi = g.w as isize - 1 - off;
                if hi < 0 {
                    continue;
                }
                let ow_hi = ((hi as usize) / s).min(g.ow - 1);
                if ow_lo > ow_hi {
                    continue;
                }
                let iw0 = (ow_lo * s) as isize + off;
                for n in 0..g.n {
                    let plane = &x[(n * g.cin + c) * g.h * g.w..][..g.h * g.w];
                    for oh in 0..g.oh {
                        let ih = (oh * s + u) as isize - p;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        let src = &plane[ih as usize * g.w + iw0 as usize..];
                        let dst = &mut cols[row_base + (n * g.oh + oh) * g.ow..];
                        if s == 1 {
                            let span = ow_hi - ow_lo + 1;
                            dst[ow_lo..ow_lo + span].copy_from_slice(&src[..span]);
                        } else {
                            for (k, o) in (ow_lo..=ow_hi).enumerate() {
                                dst[o] = src[k * s];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[g.col_rows(), width], cols).expect("sized above")
}

/// Scatter-adds a `[cin*kh*kw, n*oh*ow]` matrix back onto input positions:
/// the exact adjoint of [`im2col`].
fn col2im<S: Scalar>(cols: &[S], g: &Geom) -> Tensor<S> {
    let width = g.col_width();
    let mut x = vec![S::ZERO; g.n * g.cin * g.h * g.w];
    let (s, p) = (g.stride, g.pad as isize);
    for c in 0..g.cin {
        for u in 0..g.kh {
            for v in 0..g.kw {
                let row_base = ((c * g.kh + u) * g.kw + v) * width;
                let off = v as isize - p;
                let ow_lo = if off >= 0 {
                    0
                } else {
                    ((-off) as usize).div_ceil(s)
                };
                let hi = g.w as isize - 1 - off;
                if hi < 0 {
                    continue;
                }
                let ow_hi = ((hi as usize) / s).min(g.ow - 1);
                if ow_lo > ow_hi {
                    continue;
                }
                let iw0 = (ow_lo * s) as isize + off;
                for n in 0..g.n {
                    let plane = &mut x[(n * g.cin + c) * g.h * g.w..][..g.h * g.w];
                    for oh in 0..g.oh {
                        let ih = (oh * s + u) as isize - p;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        let src = &cols[row_base + (n * g.oh + oh) * g.ow..];
                        let dst = &mut plane[ih as usize * g.w + iw0 as usize..];
                        for (k, o) in (ow_lo..=ow_hi).enumerate() {
                            dst[k * s] += src[o];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[g.n, g.cin, g.h, g.w], x).expect("sized above")
}

/// `[n, c, h, w]` to `[c, n*h*w]`: lines channels up as gemm rows.
fn nchw_to_mat<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let plane: usize = x.shape()[2..].iter().product();
    let src = x.data();
    let mut out = vec![S::ZERO; src.len()];
    for ni in 0..n {
        for ci in 0..c {
            out[ci * n * plane + ni * plane..][..plane]
                .copy_from_slice(&src[(ni * c + ci) * plane..][..plane]);
        }
    }
    Tensor::from_vec(&[c, n * plane], out).expect("sized above")
}

/// `[c, n*h*w]` back to `[n, c, h, w]`.
fn mat_to_nchw<S: Scalar>(m: &Tensor<S>, n: usize, c: usize, h: usize, w: usize) -> Tensor<S> {
    let plane = h * w;
    let src = m.data();
    let mut out = vec![S::ZERO; src.len()];
    for ni in 0..n {
        for ci in 0..c {
            out[(ni * c + ci) * plane..][..plane]
                .copy_from_slice(&src[ci * n * plane + ni * plane..][..plane]);
        }
    }
    Tensor::from_vec(&[n, c, h, w], out).expect("sized above")
}

fn conv_geom<S: Scalar>(
    x: &Tensor<S>,
    kernel: &Tensor<S>,
    stride: usize,
    pad: usize,
) -> Result<Geom> {
    if x.ndim() != 4 || kernel.ndim() != 4 {
        return Err(Error::shape(format!(
            "conv2d needs rank-4 input and kernel, got {:?} and {:?}",
            x.shape(),
            kernel.shape()
        )));
    }
    let (n, cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, kc, kh, kw) = (
        kernel.shape()[0],
        kernel.shape()[1],
        kernel.shape()[2],
        kernel.shape()[3],
    );
    if kc != cin {
        return Err(Error::shape(format!(
            "kernel expects {kc} input channels, input has {cin}"
        )));
    }
    Ok(Geom {
        n,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        stride,
        pad,
        oh: conv_output_dim(h, kh, stride, pad)?,
        ow: conv_output_dim(w, kw, stride, pad)?,
    })
}

/// Strided convolution: `[n, cin, h, w] * [cout, cin, kh, kw] -> [n, cout, oh, ow]`.
pub fn conv2d<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    kernel: Var,
    stride: usize,
    pad: usize,
) -> Result<Var> {
    let xv = tape.value(x).clone();
    let kv = tape.value(kernel).clone();
    let g = conv_geom(&xv, &kv, stride, pad)?;

    let cols = im2col(xv.data(), &g);
    let kmat = kv.reshape(&[g.cout, g.col_rows()])?;
    let out_mat = kmat.matmul(&cols)?;
    let out = mat_to_nchw(&out_mat, g.n, g.cout, g.oh, g.ow);

    let want_xg = tape.wants_grad(x);
    let want_kg = tape.wants_grad(kernel);
    let (xi, ki) = (x.id(), kernel.id());
    Ok(tape.push_op(
        out,
        vec![xi, ki],
        Box::new(move |gy| {
            let gmat = nchw_to_mat(gy);
            let mut contribs = Vec::with_capacity(2);
            if want_kg {
                let colst = cols.transpose2().expect("rank 2");
                let gk = gmat.matmul(&colst).expect("shapes fixed at record time");
                let gk = gk
                    .reshape(&[g.cout, g.cin, g.kh, g.kw])
                    .expect("same element count");
                contribs.push((ki, gk));
            }
            if want_xg {
                let kt = kmat.transpose2().expect("rank 2");
                let gcols = kt.matmul(&gmat).expect("shapes fixed at record time");
                contribs.push((xi, col2im(gcols.data(), &g)));
            }
            contribs
        }),
    ))
}

/// Fractionally-strided convolution:
/// `[n, cin, h, w] * [cin, cout, kh, kw] -> [n, cout, oh, ow]` where
/// `oh = (h-1)*stride - 2*pad + kh + out_pad`. Exact adjoint of [`conv2d`]
/// with the same kernel tensor.
pub fn conv2d_transpose<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    kernel: Var,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Result<Var> {
    let xv = tape.value(x).clone();
    let kv = tape.value(kernel).clone();
    if xv.ndim() != 4 || kv.ndim() != 4 {
        return Err(Error::shape(format!(
            "conv2d_transpose needs rank-4 input and kernel, got {:?} and {:?}",
            xv.shape(),
            kv.shape()
        )));
    }
    let (n, cin, h, w) = (
        xv.shape()[0],
        xv.shape()[1],
        xv.shape()[2],
        xv.shape()[3],
    );
    let (kcin, cout, kh, kw) = (
        kv.shape()[0],
        kv.shape()[1],
        kv.shape()[2],
        kv.shape()[3],
    );
    if kcin != cin {
        return Err(Error::shape(format!(
            "transpose kernel expects {kcin} input channels, input has {cin}"
        )));
    }
    let oh = transpose_output_dim(h, kh, stride, pad, out_pad)?;
    let ow = transpose_output_dim(w, kw, stride, pad, out_pad)?;

    // The transposed convolution is the adjoint of a forward convolution
    // whose input is this op's output. Everything below runs through that
    // virtual geometry.
    let g = Geom {
        n,
        cin: cout,
        h: oh,
        w: ow,
        cout: cin,
        kh,
        kw,
        stride,
        pad,
        oh: h,
        ow: w,
    };
    debug_assert_eq!(conv_output_dim(oh, kh, stride, pad).unwrap(), h);

    let kmat = kv.reshape(&[g.cout, g.col_rows()])?;
    let x_mat = nchw_to_mat(&xv);
    let kt = kmat.transpose2()?;
    let out_cols = kt.matmul(&x_mat)?;
    let out = col2im(out_cols.data(), &g);

    let want_xg = tape.wants_grad(x);
    let want_kg = tape.wants_grad(kernel);
    let (xi, ki) = (x.id(), kernel.id());
    Ok(tape.push_op(
        out,
        vec![xi, ki],
        Box::new(move |gy| {
            let gcols = im2col(gy.data(), &g);
            let mut contribs = Vec::with_capacity(2);
            if want_kg {
                let gcolst = gcols.transpose2().expect("rank 2");
                let gk = x_mat.matmul(&gcolst).expect("shapes fixed at record time");
                let gk = gk
                    .reshape(&[cin, cout, kh, kw])
                    .expect("same element count");
                contribs.push((ki, gk));
            }
            if want_xg {
                let gx_mat = kmat.matmul(&gcols).expect("shapes fixed at record time");
                contribs.push((xi, mat_to_nchw(&gx_mat, n, cin, h, w)));
            }
            contribs
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tape::grad_check;

    fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut t = Tensor::zeros(shape);
        Rng::from_seed(seed).fill_normal(t.data_mut(), 0.0, 1.0);
        t
    }

    /// Direct six-loop convolution used as the oracle for the gemm path.
    fn conv_naive(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let (n, cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (cout, _, kh, kw) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
        let oh = conv_output_dim(h, kh, stride, pad).unwrap();
        let ow = conv_output_dim(w, kw, stride, pad).unwrap();
        let mut out = Tensor::zeros(&[n, cout, oh, ow]);
        let od = out.data_mut();
        for ni in 0..n {
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for u in 0..kh {
                                for v in 0..kw {
                                    let iy = (oy * stride + u) as isize - pad as isize;
                                    let ix = (ox * stride + v) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    acc += x.at4(ni, ci, iy as usize, ix as usize)
                                        * k.at4(co, ci, u, v);
                                }
                            }
                        }
                        od[((ni * cout + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn run_conv(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let kv = tape.constant(k.clone());
        let y = conv2d(&mut tape, xv, kv, stride, pad).unwrap();
        tape.value(y).clone()
    }

    fn run_tconv(
        x: &Tensor<f64>,
        k: &Tensor<f64>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Tensor<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let kv = tape.constant(k.clone());
        let y = conv2d_transpose(&mut tape, xv, kv, stride, pad, out_pad).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn output_dims_match_the_strided_formulas() {
        // 64 -> 32 with k=5, s=2, p=2, and back up with out_pad 1.
        assert_eq!(conv_output_dim(64, 5, 2, 2).unwrap(), 32);
        assert_eq!(transpose_output_dim(4, 5, 2, 2, 1).unwrap(), 8);
        assert_eq!(transpose_output_dim(8, 5, 2, 2, 1).unwrap(), 16);
        assert_eq!(conv_output_dim(7, 3, 1, 0).unwrap(), 5);
        assert!(conv_output_dim(3, 5, 1, 0).is_err());
        assert!(transpose_output_dim(4, 5, 2, 2, 2).is_err());
    }

    #[test]
    fn gemm_conv_matches_naive_convolution() {
        for (i, &(n, cin, h, w, cout, k, s, p)) in [
            (2usize, 3usize, 8usize, 8usize, 4usize, 5usize, 2usize, 2usize),
            (1, 1, 6, 7, 2, 3, 1, 0),
            (2, 2, 9, 9, 3, 4, 2, 1),
            (1, 4, 5, 5, 1, 5, 1, 2),
            (3, 1, 8, 6, 2, 2, 2, 0),
        ]
        .iter()
        .enumerate()
        {
            let x = randn(&[n, cin, h, w], 100 + i as u64);
            let kr = randn(&[cout, cin, k, k], 200 + i as u64);
            let got = run_conv(&x, &kr, s, p);
            let want = conv_naive(&x, &kr, s, p);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12, "case {i}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn transpose_is_the_exact_adjoint_of_conv() {
        // <conv(x), y> == <x, conv_T(y)> over a grid of geometries, f64.
        let mut case = 0u64;
        for &(h, w) in &[(8usize, 8usize), (9, 7), (16, 16), (5, 11)] {
            for &k in &[2usize, 3, 4, 5] {
                for &s in &[1usize, 2, 3] {
                    for &p in &[0usize, 1, 2] {
                        if h + 2 * p < k || w + 2 * p < k {
                            continue;
                        }
                        case += 1;
                        let (n, cin, cout) = (2, 3, 2);
                        let oh = conv_output_dim(h, k, s, p).unwrap();
                        let ow = conv_output_dim(w, k, s, p).unwrap();
                        let x = randn(&[n, cin, h, w], case);
                        let kr = randn(&[cout, cin, k, k], 1000 + case);
                        let y = randn(&[n, cout, oh, ow], 2000 + case);

                        let cx = run_conv(&x, &kr, s, p);
                        let lhs: f64 = cx
                            .data()
                            .iter()
                            .zip(y.data())
                            .map(|(a, b)| a * b)
                            .sum();

                        let oph = h - ((oh - 1) * s + k - 2 * p);
                        let opw = w - ((ow - 1) * s + k - 2 * p);
                        assert!(oph < s && opw < s);
                        // Rectangular out_pad only matters when h != w; the
                        // op takes one value, so restrict to matching cases.
                        if oph != opw {
                            continue;
                        }
                        let ty = run_tconv(&y, &kr, s, p, oph);
                        assert_eq!(ty.shape(), x.shape());
                        let rhs: f64 = ty
                            .data()
                            .iter()
                            .zip(x.data())
                            .map(|(a, b)| a * b)
                            .sum();

                        let rel = (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-12);
                        assert!(rel < 1e-10, "h{h} w{w} k{k} s{s} p{p}: {lhs} vs {rhs}");
                    }
                }
            }
        }
        assert!(case >= 20, "only {case} geometry cases ran");
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let report = grad_check(
            |tape, vars| {
                let y = conv2d(tape, vars[0], vars[1], 2, 1)?;
                let sq = tape.mul(y, y)?;
                Ok(tape.mean_all(sq))
            },
            &[randn(&[2, 2, 6, 6], 11), randn(&[3, 2, 3, 3], 12)],
            1e-3,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-8, "{report:?}");
    }

    #[test]
    fn transpose_gradients_match_finite_differences() {
        let report = grad_check(
            |tape, vars| {
                let y = conv2d_transpose(tape, vars[0], vars[1], 2, 1, 1)?;
                let sq = tape.mul(y, y)?;
                Ok(tape.mean_all(sq))
            },
            &[randn(&[2, 3, 4, 4], 13), randn(&[3, 2, 3, 3], 14)],
            1e-3,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-8, "{report:?}");
    }

    #[test]
    fn upsampling_chain_doubles_extent_per_stage() {
        // 4 -> 8 -> 16 with the k=5, s=2, p=2, out_pad=1 stage geometry.
        let x = randn(&[1, 4, 4, 4], 21);
        let k1 = randn(&[4, 3, 5, 5], 22);
        let up1 = run_tconv(&x, &k1, 2, 2, 1);
        assert_eq!(up1.shape(), &[1, 3, 8, 8]);
        let k2 = randn(&[3, 2, 5, 5], 23);
        let up2 = run_tconv(&up1, &k2, 2, 2, 1);
        assert_eq!(up2.shape(), &[1, 2, 16, 16]);
    }

    #[test]
    fn shape_mismatches_are_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 8, 8]));
        let k_bad = tape.constant(Tensor::zeros(&[4, 2, 3, 3]));
        assert!(conv2d(&mut tape, x, k_bad, 1, 0).is_err());
        let k_bad_t = tape.constant(Tensor::zeros(&[2, 4, 3, 3]));
        assert!(conv2d_transpose(&mut tape, x, k_bad_t, 2, 1, 1).is_err());
        let k = tape.constant(Tensor::zeros(&[3, 4, 3, 3]));
        assert!(conv2d_transpose(&mut tape, x, k, 2, 1, 2).is_err());
    }

    #[test]
    fn frozen_kernel_skips_its_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(randn(&[1, 2, 6, 6], 31), true);
        let k = tape.leaf(randn(&[2, 2, 3, 3], 32), false);
        let y = conv2d(&mut tape, x, k, 1, 1).unwrap();
        let sq = tape.mul(y, y).unwrap();
        let loss = tape.mean_all(sq);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(k).is_none());
        assert!(g.get(x).is_some());
    }
}
