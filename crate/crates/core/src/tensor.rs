//! Dense row-major tensors and the raw math kernels.
//!
//! A [`Tensor`] is a shape plus a reference-counted buffer, so clones and
//! reshapes are cheap; mutation copies on write. All autodiff ops in
//! [`crate::tape`] build on the methods here.
//!
//! Reductions accumulate in f64 regardless of the element type. Batch-norm
//! statistics over hundreds of thousands of elements lose visible precision
//! when summed in f32, and the fixed left-to-right order keeps every run
//! deterministic either way.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Arc<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Tensor<S>> {
        let want: usize = shape.iter().product();
        if want != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {want} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: &[usize]) -> Tensor<S> {
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![S::ZERO; shape.iter().product()]),
        }
    }

    pub fn full(shape: &[usize], value: S) -> Tensor<S> {
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![value; shape.iter().product()]),
        }
    }

    /// A single-element tensor, the shape every loss reduces to.
    pub fn scalar(value: S) -> Tensor<S> {
        Tensor::full(&[1], value)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    /// Mutable access; copies the buffer if it is shared.
    pub fn data_mut(&mut self) -> &mut [S] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    /// Same buffer under a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<S>> {
        let want: usize = shape.iter().product();
        if want != self.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} ({} elements) to {shape:?} ({want})",
                self.shape,
                self.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    /// Element at [n, c, h, w]. Convenience for tests and report code, not
    /// for hot loops.
    pub fn at4(&self, n: usize, c: usize, h: usize, w: usize) -> S {
        debug_assert_eq!(self.ndim(), 4);
        let (_, cs, hs, ws) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        self.data[((n * cs + c) * hs + h) * ws + w]
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Tensor<S> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    pub fn zip(&self, other: &Tensor<S>, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "elementwise op on {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data: Arc::new(data),
        })
    }

    pub fn add(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.zip(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.zip(other, |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.zip(other, |a, b| a / b)
    }

    pub fn scale(&self, c: S) -> Tensor<S> {
        self.map(|v| v * c)
    }

    pub fn offset(&self, c: S) -> Tensor<S> {
        self.map(|v| v + c)
    }

    /// Sum of all elements, accumulated in f64.
    pub fn sum_all(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64()).sum()
    }

    pub fn mean_all(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.sum_all() / self.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.to_f64().abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Mean over every axis except axis 1; [N, C, ...] reduces to [C].
    /// This is the reduction batch normalization is built from.
    pub fn mean_dim1(&self) -> Result<Tensor<S>> {
        let sums = self.sum_dim1_f64()?;
        let count = (self.len() / self.shape[1]) as f64;
        Ok(Tensor {
            shape: vec![self.shape[1]],
            data: Arc::new(sums.into_iter().map(|s| S::from_f64(s / count)).collect()),
        })
    }

    /// Sum over every axis except axis 1; [N, C, ...] reduces to [C].
    pub fn sum_dim1(&self) -> Result<Tensor<S>> {
        let sums = self.sum_dim1_f64()?;
        Ok(Tensor {
            shape: vec![self.shape[1]],
            data: Arc::new(sums.into_iter().map(S::from_f64).collect()),
        })
    }

    fn sum_dim1_f64(&self) -> Result<Vec<f64>> {
        if self.ndim() < 2 {
            return Err(Error::shape(format!(
                "dim-1 reduction needs rank >= 2, got {:?}",
                self.shape
            )));
        }
        let n = self.shape[0];
        let c = self.shape[1];
        let inner: usize = self.shape[2..].iter().product();
        let mut sums = vec![0.0f64; c];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * inner;
                let mut acc = 0.0f64;
                for v in &self.data[base..base + inner] {
                    acc += v.to_f64();
                }
                sums[ci] += acc;
            }
        }
        Ok(sums)
    }

    /// Applies `f(x, v[c])` with `v` broadcast along axis 1.
    pub fn bcast_dim1(&self, v: &Tensor<S>, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        if self.ndim() < 2 || v.ndim() != 1 || v.len() != self.shape[1] {
            return Err(Error::shape(format!(
                "broadcast over axis 1 of {:?} with {:?}",
                self.shape,
                v.shape()
            )));
        }
        let n = self.shape[0];
        let c = self.shape[1];
        let inner: usize = self.shape[2..].iter().product();
        let mut out = vec![S::ZERO; self.len()];
        for ni in 0..n {
            for ci in 0..c {
                let vc = v.data[ci];
                let base = (ni * c + ci) * inner;
                for (o, &x) in out[base..base + inner]
                    .iter_mut()
                    .zip(&self.data[base..base + inner])
                {
                    *o = f(x, vc);
                }
            }
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: Arc::new(out),
        })
    }

    /// Matrix product of [m, k] by [k, n].
    ///
    /// Plain ikj loops with k and j blocked so the hot tile of `b` stays in
    /// L2; the compiler autovectorizes the inner update.
    pub fn matmul(&self, b: &Tensor<S>) -> Result<Tensor<S>> {
        let (m, k) = self.dims2("matmul lhs")?;
        let (kb, n) = b.dims2("matmul rhs")?;
        if k != kb {
            return Err(Error::shape(format!(
                "matmul inner dims {k} vs {kb} ({:?} x {:?})",
                self.shape, b.shape
            )));
        }
        let mut out = vec![S::ZERO; m * n];
        let ad = &self.data[..];
        let bd = &b.data[..];
        const KB: usize = 512;
        const NB: usize = 256;
        for k0 in (0..k).step_by(KB) {
            let kend = (k0 + KB).min(k);
            for j0 in (0..n).step_by(NB) {
                let jend = (j0 + NB).min(n);
                for i in 0..m {
                    let arow = &ad[i * k..(i + 1) * k];
                    let orow = &mut out[i * n + j0..i * n + jend];
                    // Four k steps per pass over the output row, so each
                    // store amortizes four fused multiply-adds.
                    let mut kk = k0;
                    while kk + 4 <= kend {
                        let (a0, a1, a2, a3) =
                            (arow[kk], arow[kk + 1], arow[kk + 2], arow[kk + 3]);
                        let b0 = &bd[kk * n + j0..kk * n + jend];
                        let b1 = &bd[(kk + 1) * n + j0..(kk + 1) * n + jend];
                        let b2 = &bd[(kk + 2) * n + j0..(kk + 2) * n + jend];
                        let b3 = &bd[(kk + 3) * n + j0..(kk + 3) * n + jend];
                        for ((((o, &v0), &v1), &v2), &v3) in
                            orow.iter_mut().zip(b0).zip(b1).zip(b2).zip(b3)
                        {
                            let mut acc = a0.mul_add(v0, *o);
                            acc = a1.mul_add(v1, acc);
                            acc = a2.mul_add(v2, acc);
                            acc = a3.mul_add(v3, acc);
                            *o = acc;
                        }
                        kk += 4;
                    }
                    while kk < kend {
                        let aik = arow[kk];
                        let brow = &bd[kk * n + j0..kk * n + jend];
                        for (o, &bv) in orow.iter_mut().zip(brow) {
                            *o = aik.mul_add(bv, *o);
                        }
                        kk += 1;
                    }
                }
            }
        }
        Tensor::from_vec(&[m, n], out)
    }

    /// Transpose of a [m, n] matrix, blocked for cache friendliness.
    pub fn transpose2(&self) -> Result<Tensor<S>> {
        let (m, n) = self.dims2("transpose")?;
        let mut out = vec![S::ZERO; m * n];
        const B: usize = 32;
        for i0 in (0..m).step_by(B) {
            for j0 in (0..n).step_by(B) {
                for i in i0..(i0 + B).min(m) {
                    for j in j0..(j0 + B).min(n) {
                        out[j * m + i] = self.data[i * n + j];
                    }
                }
            }
        }
        Tensor::from_vec(&[n, m], out)
    }

    /// Concatenation along axis 0.
    pub fn concat_rows(parts: &[&Tensor<S>]) -> Result<Tensor<S>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let tail = &first.shape[1..];
        let mut rows = 0;
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(Error::shape(format!(
                    "concat_rows of {:?} vs {:?}",
                    first.shape, p.shape
                )));
            }
            rows += p.shape[0];
        }
        let mut data = Vec::with_capacity(rows * tail.iter().product::<usize>());
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(tail);
        Tensor::from_vec(&shape, data)
    }

    /// Concatenation along axis 1 of two rank-2 tensors.
    pub fn concat_cols(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        let (ra, ca) = a.dims2("concat_cols lhs")?;
        let (rb, cb) = b.dims2("concat_cols rhs")?;
        if ra != rb {
            return Err(Error::shape(format!("concat_cols rows {ra} vs {rb}")));
        }
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            data.extend_from_slice(&a.data[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&b.data[r * cb..(r + 1) * cb]);
        }
        Tensor::from_vec(&[ra, ca + cb], data)
    }

    /// Concatenation along axis 1 of two rank-4 tensors.
    pub fn concat_channels(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        if a.ndim() != 4 || b.ndim() != 4 {
            return Err(Error::shape("concat_channels needs rank-4 inputs"));
        }
        let (n, ca, h, w) = (a.shape[0], a.shape[1], a.shape[2], a.shape[3]);
        let (nb, cb, hb, wb) = (b.shape[0], b.shape[1], b.shape[2], b.shape[3]);
        if n != nb || h != hb || w != wb {
            return Err(Error::shape(format!(
                "concat_channels of {:?} vs {:?}",
                a.shape, b.shape
            )));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * (ca + cb) * plane);
        for ni in 0..n {
            data.extend_from_slice(&a.data[ni * ca * plane..(ni + 1) * ca * plane]);
            data.extend_from_slice(&b.data[ni * cb * plane..(ni + 1) * cb * plane]);
        }
        Tensor::from_vec(&[n, ca + cb, h, w], data)
    }

    /// Rows `range` of the leading axis, copied out.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor<S>> {
        if self.ndim() < 1 || end > self.shape[0] || start > end {
            return Err(Error::shape(format!(
                "row slice {start}..{end} of {:?}",
                self.shape
            )));
        }
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Tensor::from_vec(&shape, self.data[start * inner..end * inner].to_vec())
    }

    fn dims2(&self, what: &str) -> Result<(usize, usize)> {
        if self.ndim() != 2 {
            return Err(Error::shape(format!(
                "{what} needs a rank-2 tensor, got {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn reshape_shares_data_and_checks_len() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = a.reshape(&[3, 2]).unwrap();
        assert_eq!(b.shape(), &[3, 2]);
        assert_eq!(b.data(), a.data());
        assert!(a.reshape(&[4, 2]).is_err());
    }

    #[test]
    fn matmul_against_hand_computed_product() {
        // [[1,2],[3,4],[5,6]] x [[7,8,9],[10,11,12]]
        let a = t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t(&[2, 3], &[7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[3, 3]);
        assert_eq!(
            c.data(),
            &[27.0, 30.0, 33.0, 61.0, 68.0, 75.0, 95.0, 106.0, 117.0]
        );
    }

    #[test]
    fn matmul_blocked_matches_naive_on_odd_sizes() {
        // Sizes straddle the block boundaries to exercise the tail paths.
        let mut rng = crate::rng::Rng::from_seed(5);
        for &(m, k, n) in &[(1, 1, 1), (3, 513, 7), (5, 1030, 259), (17, 64, 300)] {
            let mut a = vec![0.0f64; m * k];
            let mut b = vec![0.0f64; k * n];
            rng.fill_uniform(&mut a, -1.0, 1.0);
            rng.fill_uniform(&mut b, -1.0, 1.0);
            let ta = Tensor::from_vec(&[m, k], a.clone()).unwrap();
            let tb = Tensor::from_vec(&[k, n], b.clone()).unwrap();
            let c = ta.matmul(&tb).unwrap();
            for i in 0..m {
                for j in 0..n {
                    let mut want = 0.0;
                    for kk in 0..k {
                        want += a[i * k + kk] * b[kk * n + j];
                    }
                    let got = c.data()[i * n + j];
                    assert!((got - want).abs() < 1e-9, "({i},{j}) {got} vs {want}");
                }
            }
        }
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dims() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[4, 2]);
        assert!(a.matmul(&b).is_err());
    }

    #[test]
    fn transpose_round_trips() {
        let mut rng = crate::rng::Rng::from_seed(2);
        let mut v = vec![0.0f64; 37 * 65];
        rng.fill_uniform(&mut v, -1.0, 1.0);
        let a = Tensor::from_vec(&[37, 65], v).unwrap();
        let tt = a.transpose2().unwrap().transpose2().unwrap();
        assert_eq!(a.data(), tt.data());
        let at = a.transpose2().unwrap();
        assert_eq!(at.shape(), &[65, 37]);
        assert_eq!(at.data()[2 * 37 + 5], a.data()[5 * 65 + 2]);
    }

    #[test]
    fn mean_dim1_reduces_nchw_to_c() {
        // Two images, two channels of 2x2; channel means are easy by hand.
        let a = t(
            &[2, 2, 1, 2],
            &[1.0, 2.0, 10.0, 20.0, 3.0, 4.0, 30.0, 40.0],
        );
        let m = a.mean_dim1().unwrap();
        assert_eq!(m.shape(), &[2]);
        assert_eq!(m.data(), &[2.5, 25.0]);
    }

    #[test]
    fn bcast_dim1_applies_per_channel() {
        let a = t(&[1, 2, 1, 2], &[1.0, 2.0, 3.0, 4.0]);
        let v = t(&[2], &[10.0, 100.0]);
        let out = a.bcast_dim1(&v, |x, c| x * c).unwrap();
        assert_eq!(out.data(), &[10.0, 20.0, 300.0, 400.0]);
        let bad = t(&[3], &[0.0; 3]);
        assert!(a.bcast_dim1(&bad, |x, _| x).is_err());
    }

    #[test]
    fn concat_cols_interleaves_rows() {
        let a = t(&[2, 2], &[1.0, 2.0, 5.0, 6.0]);
        let b = t(&[2, 1], &[3.0, 7.0]);
        let c = Tensor::concat_cols(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.data(), &[1.0, 2.0, 3.0, 5.0, 6.0, 7.0]);
    }

    #[test]
    fn concat_channels_stacks_planes() {
        let a = t(&[2, 1, 1, 2], &[1.0, 2.0, 5.0, 6.0]);
        let b = t(&[2, 2, 1, 2], &[9.0, 9.0, 8.0, 8.0, 7.0, 7.0, 6.0, 6.0]);
        let c = Tensor::concat_channels(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 3, 1, 2]);
        assert_eq!(
            c.data(),
            &[1.0, 2.0, 9.0, 9.0, 8.0, 8.0, 5.0, 6.0, 7.0, 7.0, 6.0, 6.0]
        );
    }

    #[test]
    fn slice_rows_copies_the_right_span() {
        let a = t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let s = a.slice_rows(1, 3).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.data(), &[3.0, 4.0, 5.0, 6.0]);
    }

    /// Throughput probe for budgeting training runs; not a correctness test.
    /// Run with `cargo test gemm_throughput -- --ignored --nocapture`.
    #[test]
    #[ignore]
    fn gemm_throughput_probe() {
        let mut rng = crate::rng::Rng::from_seed(1);
        for &(m, k, n) in &[(64usize, 800usize, 8192usize), (128, 1600, 4096), (256, 256, 65536)] {
            let mut a = Tensor::<f32>::zeros(&[m, k]);
            let mut b = Tensor::<f32>::zeros(&[k, n]);
            rng.fill_uniform(a.data_mut(), -1.0, 1.0);
            rng.fill_uniform(b.data_mut(), -1.0, 1.0);
            let start = std::time::Instant::now();
            let reps = 20;
            for _ in 0..reps {
                std::hint::black_box(a.matmul(&b).unwrap());
            }
            let secs = start.elapsed().as_secs_f64() / reps as f64;
            let gflops = (2.0 * m as f64 * k as f64 * n as f64) / secs / 1e9;
            println!("gemm {m}x{k}x{n}: {gflops:.1} GFLOP/s");
        }
    }

    #[test]
    fn copy_on_write_leaves_clones_untouched() {
        let a = t(&[2], &[1.0, 2.0]);
        let mut b = a.clone();
        b.data_mut()[0] = 99.0;
        assert_eq!(a.data(), &[1.0, 2.0]);
        assert_eq!(b.data(), &[99.0, 2.0]);
    }
}
