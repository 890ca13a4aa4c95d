use super::Tensor;
use crate::error::{Error, Result};

/// Saved normalization statistics, reused by the gradient pass.
#[derive(Debug, Clone)]
pub struct GroupNormStats {
    /// Normalized input before the affine step, same shape as the input.
    pub xhat: Tensor,
    /// `1 / sqrt(var + eps)` per `(sample, group)`.
    pub inv_std: Vec<f64>,
    pub groups: usize,
}

/// Group normalization over `x: [N, ..., C]`.
///
/// Axis 0 indexes independent samples; within a sample, channels are split
/// into `groups` contiguous groups and each group is normalized over every
/// middle position and its channels (biased variance). `gain` and `bias`
/// have shape `[C]`. With one group and `x: [N, 1, C]` this is layer norm.
pub fn group_norm(
    x: &Tensor,
    groups: usize,
    eps: f64,
    gain: &Tensor,
    bias: &Tensor,
) -> Result<Tensor> {
    Ok(group_norm_with_stats(x, groups, eps, gain, bias)?.0)
}

pub(crate) fn group_norm_with_stats(
    x: &Tensor,
    groups: usize,
    eps: f64,
    gain: &Tensor,
    bias: &Tensor,
) -> Result<(Tensor, GroupNormStats)> {
    if x.rank() < 2 {
        return Err(Error::invalid(
            "group_norm",
            format!("needs rank >= 2, got {:?}", x.shape()),
        ));
    }
    let c = x.last_dim();
    if groups == 0 || c % groups != 0 {
        return Err(Error::invalid(
            "group_norm",
            format!("{c} channels not divisible into {groups} groups"),
        ));
    }
    if gain.shape() != [c] || bias.shape() != [c] {
        return Err(Error::shape("group_norm", x.shape(), gain.shape()));
    }
    let n = x.dim(0);
    let per_sample = x.len() / n;
    let positions = per_sample / c;
    let cg = c / groups;
    let count = (positions * cg) as f64;
    let src = x.data();
    let mut xhat = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    let mut inv_std = Vec::with_capacity(n * groups);
    for s in 0..n {
        let base = s * per_sample;
        for g in 0..groups {
            let chans = g * cg..(g + 1) * cg;
            let mut sum = 0.0;
            for p in 0..positions {
                for ch in chans.clone() {
                    sum += src[base + p * c + ch];
                }
            }
            let mean = sum / count;
            let mut var = 0.0;
            for p in 0..positions {
                for ch in chans.clone() {
                    let d = src[base + p * c + ch] - mean;
                    var += d * d;
                }
            }
            let istd = 1.0 / (var / count + eps).sqrt();
            inv_std.push(istd);
            for p in 0..positions {
                for ch in chans.clone() {
                    let i = base + p * c + ch;
                    let h = (src[i] - mean) * istd;
                    xhat[i] = h;
                    out[i] = h * gain.data()[ch] + bias.data()[ch];
                }
            }
        }
    }
    let shape = x.shape().to_vec();
    Ok((
        Tensor::from_parts(shape.clone(), out),
        GroupNormStats {
            xhat: Tensor::from_parts(shape, xhat),
            inv_std,
            groups,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn unit(c: usize) -> (Tensor, Tensor) {
        (Tensor::ones(&[c]), Tensor::zeros(&[c]))
    }

    #[test]
    fn groups_have_zero_mean_unit_variance() {
        let x = Rng::new(3)
            .normal_tensor(&[2, 5, 5, 8], 3.0)
            .add_scalar(4.0);
        let (g, b) = unit(8);
        let y = group_norm(&x, 4, 0.0, &g, &b).unwrap();
        for s in 0..2 {
            for grp in 0..4 {
                let vals: Vec<f64> = (0..25)
                    .flat_map(|p| (grp * 2..grp * 2 + 2).map(move |ch| (p, ch)))
                    .map(|(p, ch)| y.data()[s * 200 + p * 8 + ch])
                    .collect();
                let m = vals.iter().sum::<f64>() / vals.len() as f64;
                let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
                assert!(m.abs() < 1e-6 && (v - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn normalized_input_is_unchanged() {
        let x = Tensor::from_vec(&[1, 4, 1], vec![-1.0, 1.0, -1.0, 1.0]).unwrap();
        let (g, b) = unit(1);
        let y = group_norm(&x, 1, 1e-12, &g, &b).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-6);
    }

    #[test]
    fn single_group_matches_layer_norm_oracle() {
        let x = Rng::new(4).normal_tensor(&[6, 1, 10], 2.0);
        let gain = Rng::new(5).normal_tensor(&[10], 1.0);
        let bias = Rng::new(6).normal_tensor(&[10], 1.0);
        let y = group_norm(&x, 1, 1e-5, &gain, &bias).unwrap();
        for r in 0..6 {
            let row = &x.data()[r * 10..(r + 1) * 10];
            let m = row.iter().sum::<f64>() / 10.0;
            let v = row.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 10.0;
            for j in 0..10 {
                let want = (row[j] - m) / (v + 1e-5).sqrt() * gain.data()[j] + bias.data()[j];
                assert!((y.data()[r * 10 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_input_normalizes_to_zero() {
        let x = Tensor::full(&[2, 3, 3, 4], 0.3);
        let (g, b) = unit(4);
        let y = group_norm(&x, 2, 1e-5, &g, &b).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn indivisible_groups_error() {
        let x = Tensor::zeros(&[1, 2, 6]);
        let (g, b) = unit(6);
        assert!(group_norm(&x, 4, 1e-5, &g, &b).is_err());
    }
}
