//! Convolution via im2col.
//!
//! Both 2-D (per frame) and 3-D convolutions are lowered to a gather of input
//! patches followed by one [`Tensor::matmul`]. Patch columns are ordered
//! `(dt, dy, dx, c_in)`, matching the row-major kernel layouts
//! `[kh, kw, C_in, C_out]` and `[kt, kh, kw, C_in, C_out]`.
//!
//! Output extents per axis, for input extent `i`, kernel `k`, stride `s`:
//!
//! * `Valid`: `o = (i - k) / s + 1` (floor), requires `i >= k`.
//! * `Same`: `o = ceil(i / s)`; the total zero padding
//!   `max((o - 1) * s + k - i, 0)` is split with the smaller half before.

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

const PAD: u32 = u32::MAX;

/// Patch-gather plan for one convolution shape.
#[derive(Debug, Clone)]
pub struct ConvGeometry {
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub output: [usize; 3],
    pub pad_before: [usize; 3],
    /// `rows * taps` input positions; `PAD` marks zero padding.
    index: Vec<u32>,
}

impl ConvGeometry {
    pub fn new(
        input: [usize; 3],
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: Padding,
    ) -> Result<Self> {
        let mut output = [0; 3];
        let mut pad_before = [0; 3];
        for ax in 0..3 {
            let (i, k, s) = (input[ax], kernel[ax], stride[ax]);
            if k == 0 || s == 0 {
                return Err(Error::invalid(
                    "conv",
                    "kernel and stride extents must be positive",
                ));
            }
            match padding {
                Padding::Valid => {
                    if k > i {
                        return Err(Error::invalid(
                            "conv",
                            format!("kernel {kernel:?} larger than input {input:?}"),
                        ));
                    }
                    output[ax] = (i - k) / s + 1;
                }
                Padding::Same => {
                    let o = i.div_ceil(s);
                    let total = ((o - 1) * s + k).saturating_sub(i);
                    if k > i + total {
                        return Err(Error::invalid(
                            "conv",
                            format!("kernel {kernel:?} larger than padded input {input:?}"),
                        ));
                    }
                    output[ax] = o;
                    pad_before[ax] = total / 2;
                }
            }
        }
        let rows = output.iter().product::<usize>();
        let taps = kernel.iter().product::<usize>();
        let mut index = Vec::with_capacity(rows * taps);
        for ot in 0..output[0] {
            for oy in 0..output[1] {
                for ox in 0..output[2] {
                    for dt in 0..kernel[0] {
                        for dy in 0..kernel[1] {
                            for dx in 0..kernel[2] {
                                let pos = [
                                    ot * stride[0] + dt,
                                    oy * stride[1] + dy,
                                    ox * stride[2] + dx,
                                ];
                                let mut src = [0usize; 3];
                                let mut inside = true;
                                for ax in 0..3 {
                                    match pos[ax].checked_sub(pad_before[ax]) {
                                        Some(p) if p < input[ax] => src[ax] = p,
                                        _ => inside = false,
                                    }
                                }
                                index.push(if inside {
                                    ((src[0] * input[1] + src[1]) * input[2] + src[2]) as u32
                                } else {
                                    PAD
                                });
                            }
                        }
                    }
                }
            }
        }
        Ok(ConvGeometry {
            input,
            kernel,
            stride,
            output,
            pad_before,
            index,
        })
    }

    pub fn rows(&self) -> usize {
        self.output.iter().product()
    }

    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Gathers patches of a channels-last `[T, H, W, cin]` buffer into a
    /// `[rows, taps * cin]` matrix; padded positions are `0.0`.
    pub fn im2col(&self, x: &[f64], cin: usize) -> Tensor {
        let taps = self.taps();
        let mut cols = vec![0.0; self.rows() * taps * cin];
        for (slot, &src) in self.index.iter().enumerate() {
            if src != PAD {
                let s = src as usize * cin;
                cols[slot * cin..(slot + 1) * cin].copy_from_slice(&x[s..s + cin]);
            }
        }
        Tensor::from_parts(vec![self.rows(), taps * cin], cols)
    }

    /// Adjoint of [`im2col`](Self::im2col): scatter-adds patch columns back.
    pub fn col2im(&self, cols: &[f64], cin: usize) -> Vec<f64> {
        let mut x = vec![0.0; self.input.iter().product::<usize>() * cin];
        for (slot, &src) in self.index.iter().enumerate() {
            if src != PAD {
                let s = src as usize * cin;
                for (d, &c) in x[s..s + cin]
                    .iter_mut()
                    .zip(&cols[slot * cin..(slot + 1) * cin])
                {
                    *d += c;
                }
            }
        }
        x
    }
}

/// Geometry for a per-frame 2-D convolution of `x: [T,H,W,Cin]` by `k: [kh,kw,Cin,Cout]`.
pub(crate) fn conv2d_geometry(
    x: &[usize],
    k: &[usize],
    stride: usize,
    padding: Padding,
) -> Result<ConvGeometry> {
    if x.len() != 4 || k.len() != 4 || x[3] != k[2] {
        return Err(Error::shape("conv2d", x, k));
    }
    ConvGeometry::new(
        [x[0], x[1], x[2]],
        [1, k[0], k[1]],
        [1, stride, stride],
        padding,
    )
    .map(|g| {
        // Frames never mix in 2-D mode.
        debug_assert_eq!(g.output[0], x[0]);
        g
    })
}

/// Geometry for `x: [T,H,W,Cin]` by `k: [kt,kh,kw,Cin,Cout]`; `stride` is spatial,
/// the temporal stride is 1.
pub(crate) fn conv3d_geometry(
    x: &[usize],
    k: &[usize],
    stride: usize,
    padding: Padding,
) -> Result<ConvGeometry> {
    if x.len() != 4 || k.len() != 5 || x[3] != k[3] {
        return Err(Error::shape("conv3d", x, k));
    }
    ConvGeometry::new(
        [x[0], x[1], x[2]],
        [k[0], k[1], k[2]],
        [1, stride, stride],
        padding,
    )
}

pub(crate) fn conv_apply(x: &Tensor, k: &Tensor, geom: &ConvGeometry) -> Result<(Tensor, Tensor)> {
    let cin = x.last_dim();
    let cout = k.last_dim();
    let cols = geom.im2col(x.data(), cin);
    let kmat = k.reshape(&[geom.taps() * cin, cout])?;
    let out = cols.matmul(&kmat)?;
    let [t, h, w] = geom.output;
    Ok((out.reshape(&[t, h, w, cout])?, cols))
}

impl Tensor {
    /// Per-frame 2-D convolution, `[T,H,W,Cin] * [kh,kw,Cin,Cout] -> [T,H',W',Cout]`.
    pub fn conv2d(&self, k: &Tensor, stride: usize, padding: Padding) -> Result<Tensor> {
        let geom = conv2d_geometry(self.shape(), k.shape(), stride, padding)?;
        Ok(conv_apply(self, k, &geom)?.0)
    }

    /// Spatiotemporal convolution, `[T,H,W,Cin] * [kt,kh,kw,Cin,Cout] -> [T',H',W',Cout]`.
    pub fn conv3d(&self, k: &Tensor, stride: usize, padding: Padding) -> Result<Tensor> {
        let geom = conv3d_geometry(self.shape(), k.shape(), stride, padding)?;
        Ok(conv_apply(self, k, &geom)?.0)
    }
}
