//! Many-to-many temporal label propagation.
//!
//! Initial logits `Y'` are embedded per frame by a small CNN `E_L` into
//! `Ȳ: [T*H*W, D]`. Masked multihead attention with queries and keys taken
//! from the flattened decoder features `F̄^D` and values `Ȳ` propagates the
//! label embeddings between frames, giving `Ỹ`. A three-layer CNN `D_L`
//! decodes `Ỹ` back to class logits, and the result is averaged with `Y'`:
//!
//! ```text
//! Ŷ = (D_L(Ỹ) + Y') / 2
//! ```
//!
//! Under the many-to-one rule frame 0 has no earlier frame to read from; its
//! attention rows are zero and its output is `Y'` unchanged.

use serde::{Deserialize, Serialize};

use crate::attention::{FrameIndex, FrameMask, MaskRule, MultiheadAttention, ScoreScale};
use crate::autodiff::{EmptyRows, Graph, NodeId, ParamStore};
use crate::error::{Error, Result};
use crate::nn::Conv;
use crate::rng::Rng;
use crate::tensor::{Padding, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Combine {
    /// Mean of logits.
    #[default]
    Logits,
    /// Log of the mean of class probabilities.
    Probs,
}

#[derive(Debug, Clone)]
pub struct LabelPropConfig {
    /// Width of `F^D`, i.e. `d + N_h`.
    pub d_feat: usize,
    /// Attention width `N_h * d_head`.
    pub d_model: usize,
    pub heads: usize,
    /// Label embedding width `D`.
    pub d_label: usize,
    pub classes: usize,
    pub rule: MaskRule,
    pub combine: Combine,
    pub score_scale: ScoreScale,
}

#[derive(Debug, Clone)]
pub struct LabelPropOutput {
    /// `Ȳ: [T*H*W, D]`.
    pub encoded: NodeId,
    /// `Ỹ: [T*H*W, D]`.
    pub propagated: NodeId,
    /// Per-head attention weights `[T*H*W, T*H*W]`.
    pub weights: Vec<NodeId>,
    /// Per-head outputs before the output projection.
    pub heads: Vec<NodeId>,
    /// `D_L(Ỹ): [T,H,W,C]`.
    pub decoded: NodeId,
    /// `Ŷ: [T,H,W,C]`.
    pub combined: NodeId,
}

#[derive(Debug, Clone)]
pub struct LabelPropagator {
    pub cfg: LabelPropConfig,
    enc: [Conv; 2],
    attn: MultiheadAttention,
    dec: [Conv; 3],
}

impl LabelPropagator {
    pub fn new(name: &str, cfg: LabelPropConfig) -> Result<Self> {
        if cfg.classes < 2 || cfg.d_label == 0 {
            return Err(Error::Config(
                "label propagation needs C >= 2 and D >= 1".into(),
            ));
        }
        let (c, dl) = (cfg.classes, cfg.d_label);
        let attn = MultiheadAttention::new(
            format!("{name}.attn"),
            [cfg.d_feat, cfg.d_feat, dl],
            cfg.d_model,
            dl,
            cfg.heads,
        )?
        .with_scale(cfg.score_scale);
        Ok(LabelPropagator {
            enc: [
                Conv::new2d(format!("{name}.enc1"), 3, c, dl, 1, Padding::Same),
                Conv::new2d(format!("{name}.enc2"), 1, dl, dl, 1, Padding::Same),
            ],
            attn,
            dec: [
                Conv::new2d(format!("{name}.dec1"), 3, dl, dl, 1, Padding::Same),
                Conv::new2d(format!("{name}.dec2"), 3, dl, dl, 1, Padding::Same),
                Conv::new2d(format!("{name}.dec3"), 1, dl, c, 1, Padding::Same),
            ],
            cfg,
        })
    }

    pub fn attention(&self) -> &MultiheadAttention {
        &self.attn
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        for c in &self.enc {
            c.init(store, rng)?;
        }
        self.attn.init(store, rng)?;
        for c in &self.dec {
            c.init(store, rng)?;
        }
        Ok(())
    }

    /// `E_L`: `[T,H,W,C] -> [T*H*W, D]`.
    pub fn encode_labels(&self, g: &mut Graph, store: &ParamStore, y: NodeId) -> Result<NodeId> {
        let s = g.shape(y).to_vec();
        let h = self.enc[0].forward(g, store, y)?;
        let h = g.relu(h);
        let h = self.enc[1].forward(g, store, h)?;
        g.reshape(h, &[s[0] * s[1] * s[2], self.cfg.d_label])
    }

    /// `D_L`: `[T*H*W, D]` tokens on a `[T,H,W]` grid to `[T,H,W,C]` logits.
    pub fn decode_labels(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        y: NodeId,
        grid: [usize; 3],
    ) -> Result<NodeId> {
        let [t, h, w] = grid;
        let x = g.reshape(y, &[t, h, w, self.cfg.d_label])?;
        let x = self.dec[0].forward(g, store, x)?;
        let x = g.relu(x);
        let x = self.dec[1].forward(g, store, x)?;
        let x = g.relu(x);
        self.dec[2].forward(g, store, x)
    }

    /// Combines decoded propagated logits with the initial logits.
    pub fn combine(&self, g: &mut Graph, decoded: NodeId, initial: NodeId) -> Result<NodeId> {
        match self.cfg.combine {
            Combine::Logits => {
                let s = g.add(decoded, initial)?;
                Ok(g.scale(s, 0.5))
            }
            Combine::Probs => {
                let a = g.softmax_rows(decoded)?;
                let b = g.softmax_rows(initial)?;
                let s = g.add(a, b)?;
                let m = g.scale(s, 0.5);
                g.ln(m)
            }
        }
    }

    pub fn mask(&self, frames: usize, tokens_per_frame: usize) -> Result<FrameMask> {
        Ok(FrameMask::new(
            self.cfg.rule,
            FrameIndex::new(frames, tokens_per_frame)?,
        ))
    }

    /// Full propagation. `fd: [T,H,W,d_feat]`, `y0: [T,H,W,C]` initial logits.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        fd: NodeId,
        y0: NodeId,
    ) -> Result<LabelPropOutput> {
        let fs = g.shape(fd).to_vec();
        let ys = g.shape(y0).to_vec();
        if fs.len() != 4
            || ys.len() != 4
            || fs[..3] != ys[..3]
            || fs[3] != self.cfg.d_feat
            || ys[3] != self.cfg.classes
        {
            return Err(Error::shape("label_propagation", &fs, &ys));
        }
        let (t, h, w) = (fs[0], fs[1], fs[2]);
        let encoded = self.encode_labels(g, store, y0)?;
        let feats = g.reshape(fd, &[t * h * w, self.cfg.d_feat])?;
        let mask = self.mask(t, h * w)?;
        let empty = match self.cfg.rule {
            MaskRule::ManyToOne => EmptyRows::Zero,
            _ => EmptyRows::Error,
        };
        let att = self
            .attn
            .forward_masked(g, store, feats, feats, encoded, &mask, empty)?;
        let decoded = self.decode_labels(g, store, att.out, [t, h, w])?;
        let mut combined = self.combine(g, decoded, y0)?;
        if self.cfg.rule == MaskRule::ManyToOne {
            let first = g.slice(y0, 0, 0, 1)?;
            if t > 1 {
                let rest = g.slice(combined, 0, 1, t - 1)?;
                combined = g.concat(&[first, rest], 0)?;
            } else {
                combined = first;
            }
        }
        Ok(LabelPropOutput {
            encoded,
            propagated: att.out,
            weights: att.weights,
            heads: att.heads,
            decoded,
            combined,
        })
    }

    /// Pre-softmax scores `c (F Wq_h)(F Wk_h)^T` per head, recomputed with
    /// plain tensor arithmetic from flattened features `[N, d_feat]`.
    pub fn head_scores(&self, store: &ParamStore, feats: &Tensor) -> Result<Vec<Tensor>> {
        let wq = store.value(&self.attn.param_name("wq"))?;
        let wk = store.value(&self.attn.param_name("wk"))?;
        let qp = feats.matmul(wq)?;
        let kp = feats.matmul(wk)?;
        let dh = self.attn.d_head();
        let c = self.attn.scale.factor(self.attn.d_model, self.attn.heads);
        (0..self.attn.heads)
            .map(|h| {
                let q = qp.slice(1, h * dh, dh)?;
                let k = kp.slice(1, h * dh, dh)?;
                Ok(q.matmul(&k.transpose()?)?.scale(c))
            })
            .collect()
    }
}

/// Comparison of an attention matrix against `D^{-1} W` built from scores.
#[derive(Debug, Clone, Serialize)]
pub struct SpectralReport {
    pub tokens: usize,
    pub max_abs_err: f64,
    /// Rows whose degree is zero (no permitted neighbour).
    pub degenerate_rows: Vec<usize>,
}

impl SpectralReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_abs_err <= tol
    }
}

/// Builds the similarity graph `W_ij = exp(s_ij)` on permitted pairs (0
/// elsewhere), its degree matrix `D`, and the random-walk operator
/// `D^{-1} W`, then reports the largest entrywise deviation of `attention`
/// from it. Degenerate rows are expected to be all zero in `attention`.
pub fn spectral_oracle(
    scores: &Tensor,
    mask: &FrameMask,
    attention: &Tensor,
) -> Result<SpectralReport> {
    if scores.rank() != 2 || scores.shape() != attention.shape() {
        return Err(Error::shape(
            "spectral_oracle",
            scores.shape(),
            attention.shape(),
        ));
    }
    if !scores.all_finite() {
        return Err(Error::NonFinite("spectral_oracle scores".into()));
    }
    let (n, m) = (scores.dim(0), scores.dim(1));
    let mut max_abs_err: f64 = 0.0;
    let mut degenerate_rows = Vec::new();
    for i in 0..n {
        let w: Vec<f64> = (0..m)
            .map(|j| {
                if mask.allows(i, j) {
                    scores.get(&[i, j]).exp()
                } else {
                    0.0
                }
            })
            .collect();
        let degree: f64 = w.iter().sum();
        if degree == 0.0 {
            degenerate_rows.push(i);
        }
        for (j, &wij) in w.iter().enumerate() {
            let rw = if degree == 0.0 { 0.0 } else { wij / degree };
            max_abs_err = max_abs_err.max((attention.get(&[i, j]) - rw).abs());
        }
    }
    Ok(SpectralReport {
        tokens: n,
        max_abs_err,
        degenerate_rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(rule: MaskRule) -> LabelPropConfig {
        LabelPropConfig {
            d_feat: 6,
            d_model: 4,
            heads: 2,
            d_label: 3,
            classes: 2,
            rule,
            combine: Combine::Logits,
            score_scale: ScoreScale::ModelDim,
        }
    }

    fn build(rule: MaskRule, seed: u64) -> (LabelPropagator, ParamStore) {
        let lp = LabelPropagator::new("lp", cfg(rule)).unwrap();
        let mut store = ParamStore::new();
        lp.init(&mut store, &mut Rng::new(seed)).unwrap();
        (lp, store)
    }

    #[test]
    fn zero_logits_give_constant_rows() {
        let (lp, mut store) = build(MaskRule::ManyToMany, 1);
        store
            .set(
                "lp.enc1.b",
                Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]).unwrap(),
            )
            .unwrap();
        let mut g = Graph::new();
        let y = g.input(Tensor::zeros(&[2, 3, 3, 2]));
        let e = lp.encode_labels(&mut g, &store, y).unwrap();
        let v = g.value(e);
        assert_eq!(v.shape(), &[18, 3]);
        let first = v.data()[..3].to_vec();
        for row in v.data().chunks(3) {
            assert_eq!(row, first.as_slice());
        }
    }

    #[test]
    fn identical_features_average_the_other_frame() {
        let (lp, store) = build(MaskRule::ManyToMany, 2);
        let mut rng = Rng::new(3);
        let mut g = Graph::new();
        let fd = g.input(Tensor::full(&[2, 2, 2, 6], 0.3));
        let y0 = g.input(rng.normal_tensor(&[2, 2, 2, 2], 1.0));
        let out = lp.forward(&mut g, &store, fd, y0).unwrap();
        for &w in &out.weights {
            let w = g.value(w);
            for i in 0..8 {
                for j in 0..8 {
                    let want = if i / 4 != j / 4 { 0.25 } else { 0.0 };
                    assert_eq!(w.get(&[i, j]), want);
                }
            }
        }
    }

    #[test]
    fn decoded_equal_to_initial_returns_initial() {
        let (lp, _) = build(MaskRule::ManyToMany, 4);
        let y = Rng::new(5).normal_tensor(&[2, 3, 3, 2], 1.0);
        let mut g = Graph::new();
        let a = g.input(y.clone());
        let b = g.input(y.clone());
        let c = lp.combine(&mut g, a, b).unwrap();
        assert!(g.value(c).bit_eq(&y));
        let z = g.input(Tensor::zeros(&[2, 3, 3, 2]));
        let c = lp.combine(&mut g, z, b).unwrap();
        assert!(g.value(c).bit_eq(&y.scale(0.5)));
    }

    #[test]
    fn single_frame_many_to_many_is_degenerate() {
        let (lp, store) = build(MaskRule::ManyToMany, 6);
        let mut g = Graph::new();
        let fd = g.input(Tensor::ones(&[1, 2, 2, 6]));
        let y0 = g.input(Tensor::ones(&[1, 2, 2, 2]));
        assert!(matches!(
            lp.forward(&mut g, &store, fd, y0),
            Err(Error::DegenerateRow { .. })
        ));
    }

    #[test]
    fn many_to_one_first_frame_passes_through() {
        let (lp, store) = build(MaskRule::ManyToOne, 7);
        let mut rng = Rng::new(8);
        let y = rng.normal_tensor(&[3, 2, 2, 2], 1.0);
        let mut g = Graph::new();
        let fd = g.input(rng.normal_tensor(&[3, 2, 2, 6], 1.0));
        let y0 = g.input(y.clone());
        let out = lp.forward(&mut g, &store, fd, y0).unwrap();
        let combined = g.value(out.combined);
        assert_eq!(&combined.data()[..8], &y.data()[..8]);
        assert_ne!(&combined.data()[8..], &y.data()[8..]);
    }

    #[test]
    fn spectral_two_by_two_by_hand() {
        // Scores [[0, ln 3], [ln 3, 0]], all pairs allowed:
        // W = [[1, 3], [3, 1]], degrees 4, D^{-1}W = [[0.25, 0.75], [0.75, 0.25]].
        let l3 = 3f64.ln();
        let s = Tensor::from_rows(&[&[0.0, l3], &[l3, 0.0]]).unwrap();
        let a = Tensor::from_rows(&[&[0.25, 0.75], &[0.75, 0.25]]).unwrap();
        let mask = FrameMask::new(MaskRule::Full, FrameIndex::new(2, 1).unwrap());
        let r = spectral_oracle(&s, &mask, &a).unwrap();
        assert!(r.max_abs_err < 1e-15);
        assert!(r.degenerate_rows.is_empty());
    }

    #[test]
    fn spectral_uniform_scores_uniform_rows() {
        let mask = FrameMask::new(MaskRule::ManyToMany, FrameIndex::new(3, 2).unwrap());
        let s = Tensor::full(&[6, 6], 0.7);
        let mut a = Tensor::zeros(&[6, 6]);
        for i in 0..6 {
            for j in 0..6 {
                if i / 2 != j / 2 {
                    a.data_mut()[i * 6 + j] = 0.25;
                }
            }
        }
        assert!(spectral_oracle(&s, &mask, &a).unwrap().max_abs_err < 1e-15);
    }

    #[test]
    fn spectral_matches_propagator_attention() {
        let (lp, store) = build(MaskRule::ManyToMany, 9);
        let mut rng = Rng::new(10);
        let feats = rng.normal_tensor(&[3, 2, 2, 6], 1.0);
        let mut g = Graph::new();
        let fd = g.input(feats.clone());
        let y0 = g.input(rng.normal_tensor(&[3, 2, 2, 2], 1.0));
        let out = lp.forward(&mut g, &store, fd, y0).unwrap();
        let scores = lp
            .head_scores(&store, &feats.reshape(&[12, 6]).unwrap())
            .unwrap();
        let mask = lp.mask(3, 4).unwrap();
        for (s, &w) in scores.iter().zip(&out.weights) {
            let r = spectral_oracle(s, &mask, g.value(w)).unwrap();
            assert!(r.passed(1e-10), "{}", r.max_abs_err);
        }
    }

    #[test]
    fn probability_combination_is_log_mean() {
        let mut c = cfg(MaskRule::ManyToMany);
        c.combine = Combine::Probs;
        let lp = LabelPropagator::new("lp", c).unwrap();
        let mut g = Graph::new();
        let a = g.input(Tensor::from_vec(&[1, 1, 1, 2], vec![0.0, 0.0]).unwrap());
        let b = g.input(Tensor::from_vec(&[1, 1, 1, 2], vec![3f64.ln(), 0.0]).unwrap());
        let out = lp.combine(&mut g, a, b).unwrap();
        // probs (0.5, 0.5) and (0.75, 0.25) average to (0.625, 0.375)
        let v = g.value(out).data();
        assert!((v[0] - 0.625f64.ln()).abs() < 1e-15);
        assert!((v[1] - 0.375f64.ln()).abs() < 1e-15);
    }
}
