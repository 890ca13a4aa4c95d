use rayon::prelude::*;

use super::Tensor;
use crate::error::{Error, Result};

/// Below this many multiply-adds a matmul stays on the calling thread.
const PAR_MATMUL_WORK: usize = 1 << 16;
const MATMUL_ROW_BLOCK: usize = 64;

impl Tensor {
    fn zip_with(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor::from_parts(self.shape.clone(), data))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.map(|v| v + c)
    }

    pub fn relu(&self) -> Tensor {
        self.map(|v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean_all(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    /// Standard matrix product `[m,k] x [k,n] -> [m,n]`.
    ///
    /// Backed by a packed, cache-blocked kernel. The summation order of an
    /// output entry depends only on `k`, so results are reproducible bit for
    /// bit regardless of how rows are split across threads.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; m * n];
        if m * k * n == 0 {
            return Ok(Tensor::from_parts(vec![m, n], out));
        }
        let a = &self.data;
        let b = &other.data;
        // Row blocks are independent and each output entry sums over `k` in
        // the same order whichever block it lands in, so the result does not
        // depend on how the rows are split across threads.
        let block = |i0: usize, c: &mut [f64]| {
            let rows = c.len() / n;
            // SAFETY: `a` holds rows `i0..i0 + rows` of a row-major m×k
            // matrix, `b` is row-major k×n and `c` is a row-major rows×n
            // output; all strides stay within the slices.
            unsafe {
                matrixmultiply::dgemm(
                    rows,
                    k,
                    n,
                    1.0,
                    a[i0 * k..].as_ptr(),
                    k as isize,
                    1,
                    b.as_ptr(),
                    n as isize,
                    1,
                    0.0,
                    c.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        };
        if m * k * n >= PAR_MATMUL_WORK && m > MATMUL_ROW_BLOCK {
            out.par_chunks_mut(MATMUL_ROW_BLOCK * n)
                .enumerate()
                .for_each(|(bi, c)| block(bi * MATMUL_ROW_BLOCK, c));
        } else {
            block(0, &mut out);
        }
        Ok(Tensor::from_parts(vec![m, n], out))
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::invalid(
                "transpose",
                format!("needs rank 2, got {:?}", self.shape),
            ));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor::from_parts(vec![c, r], out))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.iter().any(|&e| e == 0) {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Tensor::from_parts(shape.to_vec(), self.data.clone()))
    }

    /// Concatenates along `axis`; every other extent must agree.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        if axis >= first.rank() {
            return Err(Error::invalid(
                "concat",
                format!("axis {axis} out of range for {:?}", first.shape),
            ));
        }
        for p in &parts[1..] {
            let ok = p.rank() == first.rank()
                && p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(ax, (a, b))| ax == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", &first.shape, &p.shape));
            }
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let total_axis: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut data = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total_axis;
        Ok(Tensor::from_parts(shape, data))
    }

    /// Sub-range `start..start+len` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.rank() || len == 0 || start + len > self.shape[axis] {
            return Err(Error::invalid(
                "slice",
                format!(
                    "range {start}..{} on axis {axis} of {:?}",
                    start + len,
                    self.shape
                ),
            ));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let ext = self.shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * ext + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Tensor::from_parts(shape, data))
    }

    /// Mean along `axis`, removing it.
    pub fn mean(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::invalid(
                "mean",
                format!("axis {axis} out of range for {:?}", self.shape),
            ));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let ext = self.shape[axis];
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..ext {
                let src = &self.data[(o * ext + a) * inner..(o * ext + a + 1) * inner];
                for (d, &s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let inv = 1.0 / ext as f64;
        data.iter_mut().for_each(|v| *v *= inv);
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Ok(Tensor::from_parts(shape, data))
    }

    /// Tiles a `[1, ...]` tensor `n` times along axis 0.
    pub fn repeat_rows(&self, n: usize) -> Result<Tensor> {
        if self.rank() == 0 || self.shape[0] != 1 || n == 0 {
            return Err(Error::invalid(
                "repeat_rows",
                format!("needs leading extent 1, got {:?}", self.shape),
            ));
        }
        let mut data = Vec::with_capacity(self.data.len() * n);
        for _ in 0..n {
            data.extend_from_slice(&self.data);
        }
        let mut shape = self.shape.clone();
        shape[0] = n;
        Ok(Tensor::from_parts(shape, data))
    }

    /// Numerically stable softmax along `axis`.
    ///
    /// Each slice has its maximum subtracted before exponentiation. Entries
    /// equal to `-inf` receive exactly zero weight; a slice that is entirely
    /// `-inf` is an error.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::invalid(
                "softmax",
                format!("axis {axis} out of range for {:?}", self.shape),
            ));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let ext = self.shape[axis];
        let mut out = vec![0.0; self.data.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * ext + a) * inner + i;
                let max = (0..ext)
                    .map(|a| self.data[idx(a)])
                    .fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    return Err(Error::DegenerateRow {
                        op: "softmax",
                        row: o * inner + i,
                    });
                }
                let mut sum = 0.0;
                for a in 0..ext {
                    let e = (self.data[idx(a)] - max).exp();
                    out[idx(a)] = e;
                    sum += e;
                }
                let inv = 1.0 / sum;
                for a in 0..ext {
                    out[idx(a)] *= inv;
                }
            }
        }
        Ok(Tensor::from_parts(self.shape.clone(), out))
    }

    /// Index of the largest entry along the last axis (first wins on ties).
    pub fn argmax_last(&self) -> Vec<usize> {
        let c = self.last_dim();
        self.data
            .chunks(c)
            .map(|row| {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.get(&[i, p]) * b.get(&[p, j]);
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_dot() {
        let id = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        let b = Tensor::from_rows(&[&[3.0, 4.0], &[5.0, 6.0]]).unwrap();
        assert_eq!(id.matmul(&b).unwrap(), b);
        let r = Tensor::from_rows(&[&[1.0, 2.0]]).unwrap();
        let c = Tensor::from_rows(&[&[3.0], &[4.0]]).unwrap();
        assert_eq!(r.matmul(&c).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::new(5);
        for (m, k, n) in [(7, 5, 3), (64, 48, 40), (300, 33, 17)] {
            let a = rng.normal_tensor(&[m, k], 1.0);
            let b = rng.normal_tensor(&[k, n], 1.0);
            let got = a.matmul(&b).unwrap();
            let want = naive_matmul(&a, &b);
            assert!(got
                .data()
                .iter()
                .zip(&want)
                .all(|(x, y)| (x - y).abs() < 1e-12));
        }
    }

    #[test]
    fn matmul_rows_do_not_depend_on_the_split() {
        let mut rng = Rng::new(6);
        let a = rng.normal_tensor(&[300, 70], 1.0);
        let b = rng.normal_tensor(&[70, 50], 1.0);
        let full = a.matmul(&b).unwrap();
        for (start, len) in [(0, 1), (17, 5), (63, 130), (299, 1)] {
            let part = a.slice(0, start, len).unwrap().matmul(&b).unwrap();
            assert!(part.bit_eq(&full.slice(0, start, len).unwrap()));
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn softmax_uniform_and_masked() {
        let x = Tensor::from_vec(&[4], vec![0.0; 4]).unwrap();
        assert_eq!(x.softmax(0).unwrap().data(), &[0.25; 4]);
        let ninf = f64::NEG_INFINITY;
        let x = Tensor::from_vec(&[4], vec![ninf, ninf, 0.0, 0.0]).unwrap();
        assert_eq!(x.softmax(0).unwrap().data(), &[0.0, 0.0, 0.5, 0.5]);
        let x = Tensor::from_vec(&[2, 2], vec![0.0, 1.0, ninf, ninf]).unwrap();
        assert!(matches!(
            x.softmax(1),
            Err(Error::DegenerateRow { row: 1, .. })
        ));
    }

    #[test]
    fn softmax_matches_extended_precision_oracle() {
        // exp(k - 3) / (e^-2 + e^-1 + 1) evaluated with compensated (double-double)
        // arithmetic on the exact exponent values.
        let x = Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let got = x.softmax(0).unwrap();
        let e = [(-2.0f64).exp(), (-1.0f64).exp(), 1.0];
        // two-sum of the denominator
        let (mut hi, mut lo) = (0.0f64, 0.0f64);
        for &v in &e {
            let s = hi + v;
            let bb = s - hi;
            lo += (hi - (s - bb)) + (v - bb);
            hi = s;
        }
        for (g, &num) in got.data().iter().zip(&e) {
            let q = num / hi;
            // first-order correction for the low word of the denominator
            let want = q - q * lo / hi;
            assert!((g - want).abs() < 1e-15, "{g} vs {want}");
        }
    }

    #[test]
    fn softmax_other_axis() {
        let x = Tensor::from_rows(&[&[0.0, 5.0], &[0.0, 5.0]]).unwrap();
        let y = x.softmax(0).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn relu_and_concat_and_slice() {
        let x = Tensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(x.relu().data(), &[0.0, 0.0, 2.0]);
        let a = Tensor::zeros(&[2, 3, 3, 8]);
        let b = Tensor::ones(&[2, 3, 3, 5]);
        let c = Tensor::concat(&[&a, &b], 3).unwrap();
        assert_eq!(c.shape(), &[2, 3, 3, 13]);
        assert_eq!(c.slice(3, 8, 5).unwrap(), b);
        assert_eq!(c.slice(3, 0, 8).unwrap(), a);
        let bad = Tensor::ones(&[2, 3, 4, 5]);
        assert!(Tensor::concat(&[&a, &bad], 3).is_err());
    }

    #[test]
    fn reshape_round_trip() {
        let mut rng = Rng::new(2);
        let x = rng.normal_tensor(&[2, 3, 4], 1.0);
        let y = x.reshape(&[6, 4]).unwrap().reshape(&[2, 3, 4]).unwrap();
        assert!(x.bit_eq(&y));
        assert!(x.reshape(&[5, 5]).is_err());
    }

    #[test]
    fn mean_and_transpose() {
        let x = Tensor::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]).unwrap();
        assert_eq!(x.mean(0).unwrap().data(), &[2.5, 3.5, 4.5]);
        assert_eq!(x.mean(1).unwrap().data(), &[2.0, 5.0]);
        assert_eq!(
            x.transpose().unwrap().data(),
            &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]
        );
    }

    #[test]
    fn ops_do_not_mutate_inputs() {
        let mut rng = Rng::new(9);
        let a = rng.normal_tensor(&[3, 3], 1.0);
        let b = rng.normal_tensor(&[3, 3], 1.0);
        let (a0, b0) = (a.clone(), b.clone());
        let _ = a.matmul(&b).unwrap();
        let _ = a.add(&b).unwrap();
        let _ = a.softmax(1).unwrap();
        assert!(a.bit_eq(&a0) && b.bit_eq(&b0));
    }
}
