//! Bilinear resampling, half-pixel (align-corners = false) convention.
//!
//! Output index `o` on an axis of input extent `n_in` and output extent
//! `n_out` samples the input at
//!
//! ```text
//! src = max((o + 0.5) * n_in / n_out - 0.5, 0)
//! i0  = floor(src),  i1 = min(i0 + 1, n_in - 1),  w = src - i0
//! ```
//!
//! and interpolates as `v[i0] + w * (v[i1] - v[i0])`, first along x and then
//! along y. The lerp form keeps constant images exactly constant and makes an
//! equal-size resize the identity.

use super::Tensor;
use crate::error::{Error, Result};

/// Per-axis sample positions and weights.
#[derive(Debug, Clone)]
pub struct ResizeTable {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub w: Vec<f64>,
}

impl ResizeTable {
    pub fn new(n_in: usize, n_out: usize) -> Self {
        let scale = n_in as f64 / n_out as f64;
        let mut lo = Vec::with_capacity(n_out);
        let mut hi = Vec::with_capacity(n_out);
        let mut w = Vec::with_capacity(n_out);
        for o in 0..n_out {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            lo.push(i0);
            hi.push(i1);
            w.push(if i0 == i1 { 0.0 } else { src - i0 as f64 });
        }
        ResizeTable { lo, hi, w }
    }
}

/// Resizes `[T,H,W,C]` to `[T,out_h,out_w,C]` in either direction.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if x.rank() != 4 {
        return Err(Error::invalid(
            "resize",
            format!("expects [T,H,W,C], got {:?}", x.shape()),
        ));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resize", "zero target extent"));
    }
    let (t, h, w, c) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let ty = ResizeTable::new(h, out_h);
    let tx = ResizeTable::new(w, out_w);
    let src = x.data();
    let mut out = vec![0.0; t * out_h * out_w * c];
    for f in 0..t {
        let frame = f * h * w * c;
        for oy in 0..out_h {
            let (y0, y1, wy) = (ty.lo[oy], ty.hi[oy], ty.w[oy]);
            for ox in 0..out_w {
                let (x0, x1, wx) = (tx.lo[ox], tx.hi[ox], tx.w[ox]);
                let a = frame + (y0 * w + x0) * c;
                let b = frame + (y0 * w + x1) * c;
                let cc = frame + (y1 * w + x0) * c;
                let d = frame + (y1 * w + x1) * c;
                let o = ((f * out_h + oy) * out_w + ox) * c;
                for ch in 0..c {
                    let top = src[a + ch] + wx * (src[b + ch] - src[a + ch]);
                    let bot = src[cc + ch] + wx * (src[d + ch] - src[cc + ch]);
                    out[o + ch] = top + wy * (bot - top);
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![t, out_h, out_w, c], out))
}

/// Adjoint of [`resize_bilinear`] for the gradient pass.
pub(crate) fn resize_bilinear_adjoint(g: &Tensor, in_h: usize, in_w: usize) -> Tensor {
    let (t, out_h, out_w, c) = (g.dim(0), g.dim(1), g.dim(2), g.dim(3));
    if (in_h, in_w) == (out_h, out_w) {
        return g.clone();
    }
    let ty = ResizeTable::new(in_h, out_h);
    let tx = ResizeTable::new(in_w, out_w);
    let gd = g.data();
    let mut out = vec![0.0; t * in_h * in_w * c];
    for f in 0..t {
        let frame = f * in_h * in_w * c;
        for oy in 0..out_h {
            let (y0, y1, wy) = (ty.lo[oy], ty.hi[oy], ty.w[oy]);
            for ox in 0..out_w {
                let (x0, x1, wx) = (tx.lo[ox], tx.hi[ox], tx.w[ox]);
                let weights = [
                    ((y0, x0), (1.0 - wy) * (1.0 - wx)),
                    ((y0, x1), (1.0 - wy) * wx),
                    ((y1, x0), wy * (1.0 - wx)),
                    ((y1, x1), wy * wx),
                ];
                let o = ((f * out_h + oy) * out_w + ox) * c;
                for ((yy, xx), wt) in weights {
                    if wt == 0.0 {
                        continue;
                    }
                    let dst = frame + (yy * in_w + xx) * c;
                    for ch in 0..c {
                        out[dst + ch] += wt * gd[o + ch];
                    }
                }
            }
        }
    }
    Tensor::from_parts(vec![t, in_h, in_w, c], out)
}

/// Bilinear upsampling; target extents must be at least the source extents.
pub fn bilinear_upsample(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("bilinear_upsample", "zero target extent"));
    }
    if x.rank() != 4 || out_h < x.dim(1) || out_w < x.dim(2) {
        return Err(Error::invalid(
            "bilinear_upsample",
            format!("cannot upsample {:?} to {out_h}x{out_w}", x.shape()),
        ));
    }
    resize_bilinear(x, out_h, out_w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn constant_stays_constant() {
        let x = Tensor::full(&[2, 3, 5, 2], 0.7);
        let y = bilinear_upsample(&x, 9, 11).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn same_size_is_identity() {
        let x = Rng::new(1).normal_tensor(&[1, 4, 4, 3], 1.0);
        assert!(bilinear_upsample(&x, 4, 4).unwrap().bit_eq(&x));
    }

    #[test]
    fn two_by_two_to_four_by_four_analytic_weights() {
        // Along each axis the sample weights for 2 -> 4 are
        // o=0: v0, o=1: v0 + 0.25 (v1 - v0), o=2: v0 + 0.75 (v1 - v0), o=3: v1.
        let (a, b, c, d) = (1.0, 3.0, 5.0, 13.0);
        let x = Tensor::from_vec(&[1, 2, 2, 1], vec![a, b, c, d]).unwrap();
        let y = bilinear_upsample(&x, 4, 4).unwrap();
        let w = [0.0, 0.25, 0.75, 1.0];
        for oy in 0..4 {
            for ox in 0..4 {
                let top = a + w[ox] * (b - a);
                let bot = c + w[ox] * (d - c);
                let want = top + w[oy] * (bot - top);
                assert_eq!(y.get(&[0, oy, ox, 0]), want, "({oy},{ox})");
            }
        }
        assert_eq!(y.get(&[0, 0, 0, 0]), a);
        assert_eq!(y.get(&[0, 3, 3, 0]), d);
        assert_eq!(y.get(&[0, 1, 1, 0]), 2.875);
    }

    #[test]
    fn rejects_downsampling_and_zero_extent() {
        let x = Tensor::zeros(&[1, 4, 4, 1]);
        assert!(bilinear_upsample(&x, 2, 4).is_err());
        assert!(bilinear_upsample(&x, 0, 4).is_err());
        assert!(resize_bilinear(&x, 2, 2).is_ok());
    }

    #[test]
    fn adjoint_identity() {
        let mut rng = Rng::new(8);
        let x = rng.normal_tensor(&[2, 3, 4, 2], 1.0);
        let g = rng.normal_tensor(&[2, 7, 9, 2], 1.0);
        let y = resize_bilinear(&x, 7, 9).unwrap();
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let adj = resize_bilinear_adjoint(&g, 3, 4);
        let rhs: f64 = adj.data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
