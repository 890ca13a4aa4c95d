//! Multiscale transformer encoder.
//!
//! Every pyramid level is projected to `d` channels by a 1×1 convolution and
//! flattened to `[T*H*W, d]` tokens. Levels with blocks then run a stack of
//! within-scale self-attention blocks; afterwards each encoded level except
//! the coarsest cross-attends to the next coarser level (between-scale
//! attention), queries from the finer level.
//!
//! Blocks are pre-norm:
//!
//! ```text
//! within:  h = LN(x);           x += MHA(h + p, h + p, h);      x += FFN(LN(x))
//! between: a = LN(f); b = LN(c); f += MHA(a + p_f, b + p_c, b);  f += FFN(LN(f))
//! ```
//!
//! so zeroing the attention output projections and the second feed-forward
//! layers turns every block into the identity.

use crate::attention::{MultiheadAttention, ScoreScale};
use crate::autodiff::{Graph, NodeId, ParamStore};
use crate::error::{Error, Result};
use crate::nn::{FeedForward, LayerNorm, Linear};
use crate::rng::Rng;

pub const FFN_MULT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderLevel {
    /// Pyramid scale index (1 = finest), used in parameter names.
    pub scale: usize,
    pub channels: usize,
    /// Within-scale blocks; 0 leaves the level projected but unencoded.
    pub blocks: usize,
}

#[derive(Debug, Clone)]
pub struct EncoderConfig {
    pub d: usize,
    pub heads: usize,
    /// Levels ordered fine to coarse.
    pub levels: Vec<EncoderLevel>,
    pub between_ffn: bool,
    pub score_scale: ScoreScale,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::Config("encoder needs at least one level".into()));
        }
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "d={} not divisible by N_h={}",
                self.d, self.heads
            )));
        }
        // Encoded levels must be a contiguous run ending at the coarsest.
        let first = self
            .levels
            .iter()
            .position(|l| l.blocks > 0)
            .unwrap_or(self.levels.len());
        if self.levels[first..].iter().any(|l| l.blocks == 0) {
            return Err(Error::Config(
                "encoded scales must be contiguous from the coarsest".into(),
            ));
        }
        Ok(())
    }

    pub fn encoded_levels(&self) -> impl Iterator<Item = usize> + '_ {
        self.levels
            .iter()
            .enumerate()
            .filter(|(_, l)| l.blocks > 0)
            .map(|(i, _)| i)
    }
}

#[derive(Debug, Clone)]
struct WithinBlock {
    ln1: LayerNorm,
    attn: MultiheadAttention,
    ln2: LayerNorm,
    ffn: FeedForward,
}

impl WithinBlock {
    fn new(name: &str, cfg: &EncoderConfig) -> Result<Self> {
        Ok(WithinBlock {
            ln1: LayerNorm::new(format!("{name}.ln1"), cfg.d),
            attn: MultiheadAttention::square(format!("{name}.attn"), cfg.d, cfg.heads)?
                .with_scale(cfg.score_scale),
            ln2: LayerNorm::new(format!("{name}.ln2"), cfg.d),
            ffn: FeedForward::new(&format!("{name}.ffn"), cfg.d, FFN_MULT * cfg.d),
        })
    }

    fn init(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        self.ln1.init(store)?;
        self.attn.init(store, rng)?;
        self.ln2.init(store)?;
        self.ffn.init(store, rng)
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId, p: NodeId) -> Result<NodeId> {
        let h = self.ln1.forward(g, store, x)?;
        let hp = g.add(h, p)?;
        let a = self.attn.forward(g, store, hp, hp, h)?.out;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, store, x)?;
        let f = self.ffn.forward(g, store, h)?;
        g.add(x, f)
    }
}

#[derive(Debug, Clone)]
struct BetweenBlock {
    ln_q: LayerNorm,
    ln_kv: LayerNorm,
    attn: MultiheadAttention,
    ffn: Option<(LayerNorm, FeedForward)>,
}

impl BetweenBlock {
    fn new(name: &str, cfg: &EncoderConfig) -> Result<Self> {
        Ok(BetweenBlock {
            ln_q: LayerNorm::new(format!("{name}.lnq"), cfg.d),
            ln_kv: LayerNorm::new(format!("{name}.lnkv"), cfg.d),
            attn: MultiheadAttention::square(format!("{name}.attn"), cfg.d, cfg.heads)?
                .with_scale(cfg.score_scale),
            ffn: cfg.between_ffn.then(|| {
                (
                    LayerNorm::new(format!("{name}.ln2"), cfg.d),
                    FeedForward::new(&format!("{name}.ffn"), cfg.d, FFN_MULT * cfg.d),
                )
            }),
        })
    }

    fn init(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        self.ln_q.init(store)?;
        self.ln_kv.init(store)?;
        self.attn.init(store, rng)?;
        if let Some((ln, ffn)) = &self.ffn {
            ln.init(store)?;
            ffn.init(store, rng)?;
        }
        Ok(())
    }

    fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        fine: NodeId,
        p_fine: NodeId,
        coarse: NodeId,
        p_coarse: NodeId,
    ) -> Result<NodeId> {
        let a = self.ln_q.forward(g, store, fine)?;
        let b = self.ln_kv.forward(g, store, coarse)?;
        let q = g.add(a, p_fine)?;
        let k = g.add(b, p_coarse)?;
        let att = self.attn.forward(g, store, q, k, b)?.out;
        let x = g.add(fine, att)?;
        match &self.ffn {
            None => Ok(x),
            Some((ln, ffn)) => {
                let h = ln.forward(g, store, x)?;
                let f = ffn.forward(g, store, h)?;
                g.add(x, f)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    phi: Vec<Linear>,
    within: Vec<Vec<WithinBlock>>,
    /// `between[i]` updates level `i` from level `i + 1`.
    between: Vec<Option<BetweenBlock>>,
}

impl Encoder {
    pub fn new(name: &str, cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.levels.len();
        let mut phi = Vec::with_capacity(n);
        let mut within = Vec::with_capacity(n);
        let mut between = Vec::with_capacity(n);
        for (i, lvl) in cfg.levels.iter().enumerate() {
            let s = lvl.scale;
            phi.push(Linear::new(format!("{name}.phi.s{s}"), lvl.channels, cfg.d));
            within.push(
                (0..lvl.blocks)
                    .map(|b| WithinBlock::new(&format!("{name}.w.s{s}.b{b}"), &cfg))
                    .collect::<Result<Vec<_>>>()?,
            );
            let coarser_encoded = cfg.levels.get(i + 1).is_some_and(|c| c.blocks > 0);
            between.push(if lvl.blocks > 0 && coarser_encoded {
                Some(BetweenBlock::new(&format!("{name}.b.s{s}"), &cfg)?)
            } else {
                None
            });
        }
        Ok(Encoder {
            cfg,
            phi,
            within,
            between,
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        for l in &self.phi {
            l.init(store, rng)?;
        }
        for blocks in &self.within {
            for b in blocks {
                b.init(store, rng)?;
            }
        }
        for b in self.between.iter().flatten() {
            b.init(store, rng)?;
        }
        Ok(())
    }

    /// Number of within-scale blocks plus between-scale blocks.
    pub fn block_count(&self) -> usize {
        self.within.iter().map(Vec::len).sum::<usize>() + self.between.iter().flatten().count()
    }

    /// Flattened 1×1 projection `[T,H,W,C] -> [T*H*W, d]`.
    pub fn down_project(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        level: usize,
        f: NodeId,
    ) -> Result<NodeId> {
        let s = g.shape(f).to_vec();
        if s.len() != 4 || s[3] != self.cfg.levels[level].channels {
            return Err(Error::invalid(
                "down_project",
                format!(
                    "level {level} expects [T,H,W,{}], got {s:?}",
                    self.cfg.levels[level].channels
                ),
            ));
        }
        let flat = g.reshape(f, &[s[0] * s[1] * s[2], s[3]])?;
        self.phi[level].forward(g, store, flat)
    }

    /// Encodes a fine-to-coarse pyramid. `pes[i]` is the positional encoding
    /// `[T*H_i*W_i, d]` of level `i`. Returns `[T*H_i*W_i, d]` tokens per level.
    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        feats: &[NodeId],
        pes: &[NodeId],
    ) -> Result<Vec<NodeId>> {
        let n = self.cfg.levels.len();
        if feats.len() != n || pes.len() != n {
            return Err(Error::Config(format!(
                "encoder has {n} levels, got {} features and {} encodings",
                feats.len(),
                pes.len()
            )));
        }
        for w in feats.windows(2) {
            let (a, b) = (g.shape(w[0]), g.shape(w[1]));
            if a.len() != 4 || b.len() != 4 || b[1] > a[1] || b[2] > a[2] || a[0] != b[0] {
                return Err(Error::invalid(
                    "encode",
                    format!("pyramid not fine to coarse: {a:?} then {b:?}"),
                ));
            }
        }
        let mut x = Vec::with_capacity(n);
        for (i, &f) in feats.iter().enumerate() {
            let t = self.down_project(g, store, i, f)?;
            if g.shape(pes[i]) != g.shape(t) {
                return Err(Error::shape("encode", g.shape(pes[i]), g.shape(t)));
            }
            x.push(t);
        }
        for (i, blocks) in self.within.iter().enumerate() {
            for b in blocks {
                x[i] = b.forward(g, store, x[i], pes[i])?;
            }
        }
        // Between-scale attention reads within-scale outputs only, so the
        // coarse-to-fine order below does not feed one update into another.
        let w = x.clone();
        for i in (0..n).rev() {
            if let Some(b) = &self.between[i] {
                x[i] = b.forward(g, store, w[i], pes[i], w[i + 1], pes[i + 1])?;
            }
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::sinusoidal_3d;
    use crate::nn::zero_output_projections;
    use crate::tensor::Tensor;

    fn cfg(blocks: [usize; 2]) -> EncoderConfig {
        EncoderConfig {
            d: 12,
            heads: 2,
            levels: vec![
                EncoderLevel {
                    scale: 3,
                    channels: 5,
                    blocks: blocks[0],
                },
                EncoderLevel {
                    scale: 4,
                    channels: 7,
                    blocks: blocks[1],
                },
            ],
            between_ffn: true,
            score_scale: ScoreScale::ModelDim,
        }
    }

    struct Fixture {
        enc: Encoder,
        store: ParamStore,
        feats: Vec<Tensor>,
    }

    fn fixture(blocks: [usize; 2], seed: u64) -> Fixture {
        let enc = Encoder::new("enc", cfg(blocks)).unwrap();
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        enc.init(&mut store, &mut rng).unwrap();
        let feats = vec![
            rng.normal_tensor(&[2, 4, 4, 5], 1.0),
            rng.normal_tensor(&[2, 2, 2, 7], 1.0),
        ];
        Fixture { enc, store, feats }
    }

    fn encode(fx: &Fixture, g: &mut Graph) -> Vec<NodeId> {
        let f: Vec<NodeId> = fx.feats.iter().map(|t| g.input(t.clone())).collect();
        let p = vec![
            g.input(sinusoidal_3d(2, 4, 4, 12).unwrap()),
            g.input(sinusoidal_3d(2, 2, 2, 12).unwrap()),
        ];
        fx.enc.encode(g, &fx.store, &f, &p).unwrap()
    }

    #[test]
    fn preserves_token_counts() {
        let fx = fixture([1, 2], 1);
        let mut g = Graph::new();
        let out = encode(&fx, &mut g);
        assert_eq!(g.shape(out[0]), &[32, 12]);
        assert_eq!(g.shape(out[1]), &[8, 12]);
        assert_eq!(fx.enc.block_count(), 4);
    }

    #[test]
    fn zeroed_output_projections_reduce_to_projection() {
        let mut fx = fixture([1, 2], 2);
        zero_output_projections(&mut fx.store, "enc").unwrap();
        let mut g = Graph::new();
        let out = encode(&fx, &mut g);
        for (i, &o) in out.iter().enumerate() {
            let f = g.input(fx.feats[i].clone());
            let want = fx.enc.down_project(&mut g, &fx.store, i, f).unwrap();
            assert!(g.value(o).bit_eq(g.value(want)));
        }
    }

    #[test]
    fn identity_projection_with_no_blocks_is_a_flatten() {
        let mut c = cfg([0, 0]);
        c.levels[0].channels = 12;
        c.levels[1].channels = 12;
        let enc = Encoder::new("enc", c).unwrap();
        let mut store = ParamStore::new();
        enc.init(&mut store, &mut Rng::new(0)).unwrap();
        for s in [3, 4] {
            store
                .set(&format!("enc.phi.s{s}.w"), Tensor::eye(12))
                .unwrap();
        }
        let mut rng = Rng::new(5);
        let a = rng.normal_tensor(&[2, 4, 4, 12], 1.0);
        let b = rng.normal_tensor(&[2, 2, 2, 12], 1.0);
        let mut g = Graph::new();
        let f = [g.input(a.clone()), g.input(b.clone())];
        let p = [
            g.input(Tensor::zeros(&[32, 12])),
            g.input(Tensor::zeros(&[8, 12])),
        ];
        let out = enc.encode(&mut g, &store, &f, &p).unwrap();
        assert_eq!(g.value(out[0]).data(), a.data());
        assert_eq!(g.value(out[1]).data(), b.data());
    }

    #[test]
    fn non_contiguous_encoded_scales_rejected() {
        assert!(Encoder::new("enc", cfg([1, 0])).is_err());
        assert!(Encoder::new("enc", cfg([0, 1])).is_ok());
    }

    #[test]
    fn one_coarse_token_gives_every_fine_token_the_same_update() {
        // With a single coarse token the attention weights are all 1, so the
        // between-scale attention term is the same row for every fine token.
        let mut c = cfg([1, 1]);
        c.between_ffn = false;
        let enc = Encoder::new("enc", c).unwrap();
        let mut store = ParamStore::new();
        let mut rng = Rng::new(7);
        enc.init(&mut store, &mut rng).unwrap();
        let b = enc.between[0].as_ref().unwrap();
        let mut g = Graph::new();
        let fine = g.input(rng.normal_tensor(&[6, 12], 1.0));
        let coarse = g.input(rng.normal_tensor(&[1, 12], 1.0));
        let pf = g.input(rng.normal_tensor(&[6, 12], 1.0));
        let pc = g.input(rng.normal_tensor(&[1, 12], 1.0));
        let out = b.forward(&mut g, &store, fine, pf, coarse, pc).unwrap();
        let delta = g.value(out).sub(g.value(fine)).unwrap();
        let first = &delta.data()[..12];
        for row in delta.data().chunks(12) {
            for (a, b) in row.iter().zip(first) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_coarse_values_remove_the_attention_term() {
        let mut c = cfg([1, 1]);
        c.between_ffn = false;
        let enc = Encoder::new("enc", c).unwrap();
        let mut store = ParamStore::new();
        let mut rng = Rng::new(8);
        enc.init(&mut store, &mut rng).unwrap();
        let b = enc.between[0].as_ref().unwrap();
        let mut g = Graph::new();
        let fine = g.input(rng.normal_tensor(&[6, 12], 1.0));
        let coarse = g.input(Tensor::zeros(&[3, 12]));
        let pf = g.input(rng.normal_tensor(&[6, 12], 1.0));
        let pc = g.input(rng.normal_tensor(&[3, 12], 1.0));
        let out = b.forward(&mut g, &store, fine, pf, coarse, pc).unwrap();
        assert!(g.value(out).bit_eq(g.value(fine)));
    }
}
