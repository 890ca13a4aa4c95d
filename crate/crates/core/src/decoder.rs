//! Pixel decoder (FPN) and the coarse-to-fine query decoder.
//!
//! The pixel decoder maps every level to `d` channels with a 1×1 convolution
//! and accumulates coarse to fine: `P_s = lat_s + up(relu(P_{s+1}))`.
//!
//! The query decoder starts from learned queries `Q^r` and, for each of
//! `N_d` iterations, runs one block per decoder scale from coarse to fine.
//! A block is pre-norm self-attention, cross-attention into that scale's
//! pixel features, then a feed-forward layer, each with a residual:
//!
//! ```text
//! h = LN(q);  q += MHA(h + pq, h + pq, h)
//! h = LN(q);  q += MHA(h + pq, f + p_s + ps_s, f)
//! q += FFN(LN(q))
//! ```
//!
//! The final queries attend into the finest pixel features through an
//! affinity (no value projection); the per-head maps, one channel each, are
//! concatenated in front of those features.

use serde::{Deserialize, Serialize};

use crate::attention::{
    sinusoidal_1d, Affinity, MultiheadAttention, PeKind, ScaleEmbedding, ScoreScale, EMBED_INIT_STD,
};
use crate::autodiff::{Graph, NodeId, ParamStore};
use crate::encoder::FFN_MULT;
use crate::error::{Error, Result};
use crate::nn::{FeedForward, LayerNorm, Linear};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapMode {
    /// Query `t` restricted to frame `t` (per-clip: the single query for every frame).
    FrameSlice,
    /// Mean over all query rows.
    QueryMean,
}

#[derive(Debug, Clone)]
pub struct PixelDecoder {
    laterals: Vec<Linear>,
    pub d: usize,
}

impl PixelDecoder {
    /// `channels[i]` is the input width of level `i`, fine to coarse.
    pub fn new(name: &str, channels: &[usize], d: usize) -> Self {
        let laterals = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| Linear::new(format!("{name}.lat.s{}", i + 1), c, d))
            .collect();
        PixelDecoder { laterals, d }
    }

    pub fn levels(&self) -> usize {
        self.laterals.len()
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        self.laterals.iter().try_for_each(|l| l.init(store, rng))
    }

    /// `levels[i]: [T,H_i,W_i,C_i]`, fine to coarse; returns `[T,H_i,W_i,d]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        levels: &[NodeId],
    ) -> Result<Vec<NodeId>> {
        if levels.len() != self.laterals.len() {
            return Err(Error::Config(format!(
                "pixel decoder expects {} levels, got {}",
                self.laterals.len(),
                levels.len()
            )));
        }
        let mut lat = Vec::with_capacity(levels.len());
        for (l, &x) in self.laterals.iter().zip(levels) {
            let s = g.shape(x).to_vec();
            if s.len() != 4 || s[3] != l.din {
                return Err(Error::invalid(
                    "pixel_decode",
                    format!("level expects [T,H,W,{}], got {s:?}", l.din),
                ));
            }
            let flat = g.reshape(x, &[s[0] * s[1] * s[2], s[3]])?;
            let y = l.forward(g, store, flat)?;
            lat.push(g.reshape(y, &[s[0], s[1], s[2], self.d])?);
        }
        let mut out = vec![lat[lat.len() - 1]];
        for i in (0..lat.len() - 1).rev() {
            let prev = *out.last().expect("non-empty");
            let (h, w) = (g.shape(lat[i])[1], g.shape(lat[i])[2]);
            let r = g.relu(prev);
            let up = g.resize(r, h, w)?;
            out.push(g.add(lat[i], up)?);
        }
        out.reverse();
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct DecoderBlock {
    ln1: LayerNorm,
    self_attn: MultiheadAttention,
    ln2: LayerNorm,
    cross_attn: MultiheadAttention,
    ln3: LayerNorm,
    ffn: FeedForward,
}

impl DecoderBlock {
    pub fn new(name: &str, d: usize, heads: usize, scale: ScoreScale) -> Result<Self> {
        Ok(DecoderBlock {
            ln1: LayerNorm::new(format!("{name}.ln1"), d),
            self_attn: MultiheadAttention::square(format!("{name}.self"), d, heads)?
                .with_scale(scale),
            ln2: LayerNorm::new(format!("{name}.ln2"), d),
            cross_attn: MultiheadAttention::square(format!("{name}.cross"), d, heads)?
                .with_scale(scale),
            ln3: LayerNorm::new(format!("{name}.ln3"), d),
            ffn: FeedForward::new(&format!("{name}.ffn"), d, FFN_MULT * d),
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        self.ln1.init(store)?;
        self.self_attn.init(store, rng)?;
        self.ln2.init(store)?;
        self.cross_attn.init(store, rng)?;
        self.ln3.init(store)?;
        self.ffn.init(store, rng)
    }

    /// `q, pq: [N_q, d]`; `f, key_pos: [N_tokens, d]` where `key_pos` is the
    /// positional plus scale embedding added to the keys.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        q: NodeId,
        pq: NodeId,
        f: NodeId,
        key_pos: NodeId,
    ) -> Result<NodeId> {
        let h = self.ln1.forward(g, store, q)?;
        let hp = g.add(h, pq)?;
        let a = self.self_attn.forward(g, store, hp, hp, h)?.out;
        let q = g.add(q, a)?;
        let h = self.ln2.forward(g, store, q)?;
        let hp = g.add(h, pq)?;
        let k = g.add(f, key_pos)?;
        let c = self.cross_attn.forward(g, store, hp, k, f)?.out;
        let q = g.add(q, c)?;
        let h = self.ln3.forward(g, store, q)?;
        let m = self.ffn.forward(g, store, h)?;
        g.add(q, m)
    }
}

#[derive(Debug, Clone)]
pub struct QueryDecoderConfig {
    pub d: usize,
    pub heads: usize,
    pub iterations: usize,
    /// Pyramid scale ids the blocks read from, coarse to fine.
    pub scales: Vec<usize>,
    pub n_queries: usize,
    pub frames: usize,
    pub query_pe: PeKind,
    pub map_mode: MapMode,
    pub score_scale: ScoreScale,
}

impl QueryDecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("N_d must be at least 1".into()));
        }
        if self.scales.is_empty() {
            return Err(Error::Config("decoder needs at least one scale".into()));
        }
        if self.scales.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::Config(format!(
                "decoder scales must run coarse to fine, got {:?}",
                self.scales
            )));
        }
        if self.n_queries != 1 && self.n_queries != self.frames {
            return Err(Error::Config(format!(
                "N_q must be 1 or T={}, got {}",
                self.frames, self.n_queries
            )));
        }
        if self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "d={} not divisible by N_h={}",
                self.d, self.heads
            )));
        }
        Ok(())
    }
}

/// Decoder results: final queries, `F^A`, `F^D` and the block order applied.
#[derive(Debug, Clone)]
pub struct DecoderOutput {
    pub queries: NodeId,
    /// Raw per-head affinities `[N_q, T*H_1*W_1]`.
    pub affinity: Vec<NodeId>,
    /// `[T, H_1, W_1, N_h]`.
    pub attention_map: NodeId,
    /// `[T, H_1, W_1, N_h + d]`, attention channels first.
    pub features: NodeId,
    /// `(iteration, scale)` for every block, in execution order.
    pub trace: Vec<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct QueryDecoder {
    pub cfg: QueryDecoderConfig,
    name: String,
    blocks: Vec<DecoderBlock>,
    scale_emb: Vec<ScaleEmbedding>,
    affinity: Affinity,
}

impl QueryDecoder {
    pub fn new(name: &str, cfg: QueryDecoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut blocks = Vec::new();
        for i in 0..cfg.iterations {
            for &s in &cfg.scales {
                blocks.push(DecoderBlock::new(
                    &format!("{name}.i{i}.s{s}"),
                    cfg.d,
                    cfg.heads,
                    cfg.score_scale,
                )?);
            }
        }
        let scale_emb = cfg
            .scales
            .iter()
            .map(|s| ScaleEmbedding::new(format!("{name}.scale.s{s}"), cfg.d))
            .collect();
        let affinity = Affinity::new(format!("{name}.objattn"), cfg.d, cfg.d, cfg.d, cfg.heads)?
            .with_scale(cfg.score_scale);
        Ok(QueryDecoder {
            name: name.to_owned(),
            cfg,
            blocks,
            scale_emb,
            affinity,
        })
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    fn query_name(&self) -> String {
        format!("{}.queries", self.name)
    }

    fn qpos_name(&self, s: usize) -> String {
        format!("{}.qpos.s{s}", self.name)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        let (nq, d) = (self.cfg.n_queries, self.cfg.d);
        store.insert(
            self.query_name(),
            rng.normal_tensor(&[nq, d], EMBED_INIT_STD),
        )?;
        if self.cfg.query_pe == PeKind::Learnable {
            for &s in &self.cfg.scales {
                store.insert(
                    self.qpos_name(s),
                    rng.normal_tensor(&[nq, d], EMBED_INIT_STD),
                )?;
            }
        }
        for e in &self.scale_emb {
            e.init(store, rng)?;
        }
        for b in &self.blocks {
            b.init(store, rng)?;
        }
        self.affinity.init(store, rng)
    }

    fn query_pos(&self, g: &mut Graph, store: &ParamStore, s: usize) -> Result<NodeId> {
        match self.cfg.query_pe {
            PeKind::Learnable => g.param(store, &self.qpos_name(s)),
            PeKind::Sinusoidal => Ok(g.input(sinusoidal_1d(self.cfg.n_queries, self.cfg.d)?)),
        }
    }

    /// Runs the block chain. `feats[j]` and `pes[j]` are `[N_j, d]` tokens and
    /// positional encodings for `cfg.scales[j]`.
    pub fn learn_queries(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        feats: &[NodeId],
        pes: &[NodeId],
    ) -> Result<(NodeId, Vec<(usize, usize)>)> {
        let ns = self.cfg.scales.len();
        if feats.len() != ns || pes.len() != ns {
            return Err(Error::Config(format!(
                "decoder has {ns} scales, got {} features and {} encodings",
                feats.len(),
                pes.len()
            )));
        }
        let mut key_pos = Vec::with_capacity(ns);
        let mut qpos = Vec::with_capacity(ns);
        for j in 0..ns {
            if g.shape(feats[j]) != g.shape(pes[j]) {
                return Err(Error::shape(
                    "learn_queries",
                    g.shape(feats[j]),
                    g.shape(pes[j]),
                ));
            }
            let rows = g.shape(feats[j])[0];
            let se = self.scale_emb[j].forward(g, store, rows)?;
            key_pos.push(g.add(pes[j], se)?);
            qpos.push(self.query_pos(g, store, self.cfg.scales[j])?);
        }
        let mut q = g.param(store, &self.query_name())?;
        let mut trace = Vec::with_capacity(self.blocks.len());
        for i in 0..self.cfg.iterations {
            for (j, &s) in self.cfg.scales.iter().enumerate() {
                let b = &self.blocks[i * ns + j];
                q = b.forward(g, store, q, qpos[j], feats[j], key_pos[j])?;
                trace.push((i, s));
            }
        }
        Ok((q, trace))
    }

    /// Builds `F^A: [T,H,W,N_h]` from the per-head affinities of the final
    /// queries against the finest features `f1: [T,H,W,d]`.
    pub fn object_attention(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        q: NodeId,
        f1: NodeId,
    ) -> Result<(Vec<NodeId>, NodeId)> {
        let s = g.shape(f1).to_vec();
        let (t, hw) = (s[0], s[1] * s[2]);
        if t != self.cfg.frames {
            return Err(Error::Config(format!(
                "decoder built for T={}, got {t}",
                self.cfg.frames
            )));
        }
        let k = g.reshape(f1, &[t * hw, s[3]])?;
        let maps = self.affinity.forward(g, store, q, k)?;
        let nq = self.cfg.n_queries;
        let mut cols = Vec::with_capacity(maps.len());
        for &m in &maps {
            let row = match self.cfg.map_mode {
                MapMode::FrameSlice if nq == 1 => m,
                MapMode::FrameSlice => {
                    let parts = (0..t)
                        .map(|ti| {
                            let r = g.slice(m, 0, ti, 1)?;
                            g.slice(r, 1, ti * hw, hw)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    g.concat(&parts, 1)?
                }
                MapMode::QueryMean => g.mean(m, 0)?,
            };
            cols.push(g.reshape(row, &[t * hw, 1])?);
        }
        let fa = g.concat(&cols, 1)?;
        let fa = g.reshape(fa, &[t, s[1], s[2], self.cfg.heads])?;
        Ok((maps, fa))
    }

    /// Full decode from pixel-decoder outputs `fp` (fine to coarse, scale
    /// `s` at index `s - 1`) and per-scale positional encodings `pes`
    /// (same indexing, `[T*H_s*W_s, d]`).
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        fp: &[NodeId],
        pes: &[NodeId],
    ) -> Result<DecoderOutput> {
        let mut feats = Vec::new();
        let mut fpes = Vec::new();
        for &s in &self.cfg.scales {
            let (&f, &p) = fp.get(s - 1).zip(pes.get(s - 1)).ok_or_else(|| {
                Error::Config(format!("decoder scale {s} missing from the pyramid"))
            })?;
            let sh = g.shape(f).to_vec();
            feats.push(g.reshape(f, &[sh[0] * sh[1] * sh[2], sh[3]])?);
            fpes.push(p);
        }
        let (queries, trace) = self.learn_queries(g, store, &feats, &fpes)?;
        let (affinity, attention_map) = self.object_attention(g, store, queries, fp[0])?;
        let features = g.concat(&[attention_map, fp[0]], 3)?;
        Ok(DecoderOutput {
            queries,
            affinity,
            attention_map,
            features,
            trace,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::zero_output_projections;
    use crate::tensor::{resize_bilinear, Tensor};

    fn qcfg(iterations: usize, scales: Vec<usize>, nq: usize) -> QueryDecoderConfig {
        QueryDecoderConfig {
            d: 12,
            heads: 3,
            iterations,
            scales,
            n_queries: nq,
            frames: 2,
            query_pe: PeKind::Learnable,
            map_mode: MapMode::FrameSlice,
            score_scale: ScoreScale::ModelDim,
        }
    }

    #[test]
    fn fpn_matches_hand_composition() {
        let pd = PixelDecoder::new("pd", &[3, 5], 4);
        let mut store = ParamStore::new();
        let mut rng = Rng::new(1);
        pd.init(&mut store, &mut rng).unwrap();
        store
            .set("pd.lat.s2.b", rng.normal_tensor(&[4], 1.0))
            .unwrap();
        let fine = rng.normal_tensor(&[2, 4, 4, 3], 1.0);
        let coarse = rng.normal_tensor(&[2, 2, 2, 5], 1.0);
        let mut g = Graph::new();
        let (a, b) = (g.input(fine.clone()), g.input(coarse.clone()));
        let out = pd.forward(&mut g, &store, &[a, b]).unwrap();

        let lat = |x: &Tensor, s: usize| {
            let n = x.len() / x.last_dim();
            let y = x
                .reshape(&[n, x.last_dim()])
                .unwrap()
                .matmul(store.value(&format!("pd.lat.s{s}.w")).unwrap())
                .unwrap();
            let bias = store.value(&format!("pd.lat.s{s}.b")).unwrap();
            let data = y
                .data()
                .iter()
                .enumerate()
                .map(|(i, v)| v + bias.data()[i % 4])
                .collect();
            Tensor::from_vec(&[x.dim(0), x.dim(1), x.dim(2), 4], data).unwrap()
        };
        let p2 = lat(&coarse, 2);
        let p1 = lat(&fine, 1)
            .add(&resize_bilinear(&p2.relu(), 4, 4).unwrap())
            .unwrap();
        assert!(g.value(out[1]).bit_eq(&p2));
        assert!(g.value(out[0]).max_abs_diff(&p1) < 1e-14);
    }

    #[test]
    fn zero_coarse_leaves_fine_projection() {
        let pd = PixelDecoder::new("pd", &[3, 5, 6], 4);
        let mut store = ParamStore::new();
        let mut rng = Rng::new(2);
        pd.init(&mut store, &mut rng).unwrap();
        let fine = rng.normal_tensor(&[1, 8, 8, 3], 1.0);
        let mut g = Graph::new();
        let a = g.input(fine);
        let b = g.input(Tensor::zeros(&[1, 4, 4, 5]));
        let c = g.input(Tensor::zeros(&[1, 2, 2, 6]));
        let out = pd.forward(&mut g, &store, &[a, b, c]).unwrap();
        let flat = g.reshape(a, &[64, 3]).unwrap();
        let lin = Linear::new("pd.lat.s1", 3, 4);
        let want = lin.forward(&mut g, &store, flat).unwrap();
        assert_eq!(g.value(out[0]).data(), g.value(want).data());
    }

    fn run_queries(
        dec: &QueryDecoder,
        store: &ParamStore,
        feats: &[Tensor],
    ) -> (Tensor, Vec<(usize, usize)>) {
        let mut g = Graph::new();
        let f: Vec<NodeId> = feats.iter().map(|t| g.input(t.clone())).collect();
        let p: Vec<NodeId> = feats
            .iter()
            .map(|t| g.input(Tensor::zeros(t.shape())))
            .collect();
        let (q, trace) = dec.learn_queries(&mut g, store, &f, &p).unwrap();
        (g.value(q).clone(), trace)
    }

    #[test]
    fn nine_blocks_in_coarse_to_fine_order() {
        let dec = QueryDecoder::new("dec", qcfg(3, vec![4, 3, 2], 2)).unwrap();
        let mut store = ParamStore::new();
        let mut rng = Rng::new(3);
        dec.init(&mut store, &mut rng).unwrap();
        let feats: Vec<Tensor> = [2, 8, 32]
            .iter()
            .map(|&n| rng.normal_tensor(&[n, 12], 1.0))
            .collect();
        let (q, trace) = run_queries(&dec, &store, &feats);
        assert_eq!(q.shape(), &[2, 12]);
        assert_eq!(dec.block_count(), 9);
        let want: Vec<(usize, usize)> = (0..3).flat_map(|i| [4, 3, 2].map(|s| (i, s))).collect();
        assert_eq!(trace, want);
    }

    #[test]
    fn single_block_equals_block_forward() {
        let dec = QueryDecoder::new("dec", qcfg(1, vec![2], 1)).unwrap();
        let mut store = ParamStore::new();
        let mut rng = Rng::new(4);
        dec.init(&mut store, &mut rng).unwrap();
        let f = rng.normal_tensor(&[8, 12], 1.0);
        let (q, _) = run_queries(&dec, &store, &[f.clone()]);
        let mut g = Graph::new();
        let qn = g.param(&store, "dec.queries").unwrap();
        let pq = g.param(&store, "dec.qpos.s2").unwrap();
        let fnode = g.input(f);
        let se = g.param(&store, "dec.scale.s2").unwrap();
        let kp = g.repeat_rows(se, 8).unwrap();
        let block = DecoderBlock::new("dec.i0.s2", 12, 3, ScoreScale::ModelDim).unwrap();
        let out = block.forward(&mut g, &store, qn, pq, fnode, kp).unwrap();
        assert!(g.value(out).bit_eq(&q));
    }

    #[test]
    fn zeroed_projections_pass_queries_through() {
        let dec = QueryDecoder::new("dec", qcfg(2, vec![3, 2], 2)).unwrap();
        let mut store = ParamStore::new();
        let mut rng = Rng::new(5);
        dec.init(&mut store, &mut rng).unwrap();
        zero_output_projections(&mut store, "dec").unwrap();
        let feats: Vec<Tensor> = [4, 8]
            .iter()
            .map(|&n| rng.normal_tensor(&[n, 12], 1.0))
            .collect();
        let (q, _) = run_queries(&dec, &store, &feats);
        assert!(q.bit_eq(store.value("dec.queries").unwrap()));
    }

    #[test]
    fn invalid_query_count_rejected() {
        assert!(QueryDecoder::new("dec", qcfg(1, vec![2], 3)).is_err());
        assert!(QueryDecoder::new("dec", qcfg(1, vec![2, 3], 1)).is_err());
    }

    #[test]
    fn object_attention_shapes_and_slicing() {
        let dec = QueryDecoder::new("dec", qcfg(1, vec![2], 2)).unwrap();
        let mut store = ParamStore::new();
        let mut rng = Rng::new(6);
        dec.init(&mut store, &mut rng).unwrap();
        let mut g = Graph::new();
        let q = g.input(rng.normal_tensor(&[2, 12], 1.0));
        let f1 = g.input(rng.normal_tensor(&[2, 3, 3, 12], 1.0));
        let (maps, fa) = dec.object_attention(&mut g, &store, q, f1).unwrap();
        assert_eq!(g.shape(fa), &[2, 3, 3, 3]);
        for (h, &m) in maps.iter().enumerate() {
            let m = g.value(m).clone();
            for t in 0..2 {
                for p in 0..9 {
                    assert_eq!(
                        g.value(fa).get(&[t, p / 3, p % 3, h]),
                        m.get(&[t, t * 9 + p])
                    );
                }
            }
        }
        let fd = g.concat(&[fa, f1], 3).unwrap();
        assert_eq!(g.shape(fd), &[2, 3, 3, 15]);
    }
}
