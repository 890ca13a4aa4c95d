//! Focal + dice segmentation loss with a fused analytic gradient.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub dice_eps: f64,
    pub lambda_focal: f64,
    pub lambda_dice: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            dice_eps: 1.0,
            lambda_focal: 1.0,
            lambda_dice: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossParts {
    pub focal: f64,
    pub dice: f64,
    pub total: f64,
}

fn softmax_row(z: &[f64], out: &mut [f64]) {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - m).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

/// Loss value, its parts and `dL/dlogits` for logits `[..., C]` against one
/// class index per position.
pub fn loss_and_grad(
    logits: &Tensor,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<(LossParts, Tensor)> {
    let c = logits.last_dim();
    let n = logits.len() / c.max(1);
    if c < 2 || labels.len() != n {
        return Err(Error::invalid(
            "loss",
            format!(
                "logits {:?} against {} labels",
                logits.shape(),
                labels.len()
            ),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::invalid(
            "loss",
            format!("label {bad} out of range for {c} classes"),
        ));
    }
    let mut probs = vec![0.0; n * c];
    for (z, p) in logits.data().chunks(c).zip(probs.chunks_mut(c)) {
        softmax_row(z, p);
    }
    let (alpha, gamma) = (cfg.focal_alpha, cfg.focal_gamma);
    let nf = n as f64;

    // dL/dp accumulated per position and class, chained through softmax below.
    let mut dp = vec![0.0; n * c];
    let mut focal = 0.0;
    for i in 0..n {
        let y = labels[i];
        let p = probs[i * c + y].max(f64::MIN_POSITIVE);
        let q = 1.0 - p;
        let lp = p.ln();
        focal -= alpha * q.powf(gamma) * lp;
        let mut d = -alpha * q.powf(gamma) / p;
        if gamma != 0.0 && q > 0.0 {
            d += alpha * gamma * q.powf(gamma - 1.0) * lp;
        }
        dp[i * c + y] += cfg.lambda_focal * d / nf;
    }
    focal /= nf;

    let mut inter = vec![0.0; c];
    let mut psum = vec![0.0; c];
    let mut gsum = vec![0.0; c];
    for i in 0..n {
        for k in 0..c {
            psum[k] += probs[i * c + k];
        }
        inter[labels[i]] += probs[i * c + labels[i]];
        gsum[labels[i]] += 1.0;
    }
    let eps = cfg.dice_eps;
    let cf = c as f64;
    let mut dice = 0.0;
    for k in 0..c {
        let s = psum[k] + gsum[k] + eps;
        let num = 2.0 * inter[k] + eps;
        dice += 1.0 - num / s;
        for i in 0..n {
            let gk = if labels[i] == k { 1.0 } else { 0.0 };
            dp[i * c + k] -= cfg.lambda_dice * (2.0 * gk * s - num) / (s * s * cf);
        }
    }
    dice /= cf;

    let mut dz = vec![0.0; n * c];
    for i in 0..n {
        let p = &probs[i * c..(i + 1) * c];
        let g = &dp[i * c..(i + 1) * c];
        let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        for k in 0..c {
            dz[i * c + k] = p[k] * (g[k] - dot);
        }
    }
    let total = cfg.lambda_focal * focal + cfg.lambda_dice * dice;
    if !total.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    Ok((
        LossParts { focal, dice, total },
        Tensor::from_vec(logits.shape(), dz)?,
    ))
}

/// Records the loss on the tape as one fused node.
pub fn segmentation_loss(
    g: &mut Graph,
    logits: NodeId,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<(NodeId, LossParts)> {
    let (parts, dz) = loss_and_grad(g.value(logits), labels, cfg)?;
    Ok((g.push_loss(logits, parts.total, dz), parts))
}
