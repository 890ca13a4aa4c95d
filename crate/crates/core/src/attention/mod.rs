//! Multihead attention and its frame-masked variant.
//!
//! For queries `Q [Nq, dq]`, keys `K [Nk, dk]` and values `V [Nk, dv]`, head
//! `h` computes
//!
//! ```text
//! A_h = softmax(c * (Q Wq_h)(K Wk_h)^T + M) (V Wv_h)
//! out = concat_h(A_h) Wo
//! ```
//!
//! where `Wq_h` is the `h`-th block of `d_model / heads` columns of `Wq`, `M`
//! is zero or `-inf` per the mask rule, and `c` is `1/sqrt(d_model)` by
//! default or `1/sqrt(d_model / heads)` with [`ScoreScale::HeadDim`]. The mask
//! is never materialized: disallowed entries are skipped inside the softmax.

mod embed;
mod mask;

pub use embed::{
    sinusoidal_1d, sinusoidal_3d, PeKind, PositionalEncoding, ScaleEmbedding, EMBED_INIT_STD,
};
pub use mask::{FrameIndex, FrameMask, MaskRule};

use serde::{Deserialize, Serialize};

use crate::autodiff::{EmptyRows, Graph, NodeId, ParamStore};
use crate::error::{Error, Result};
use crate::nn::xavier;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreScale {
    #[default]
    ModelDim,
    HeadDim,
}

impl ScoreScale {
    pub fn factor(self, d_model: usize, heads: usize) -> f64 {
        match self {
            ScoreScale::ModelDim => 1.0 / (d_model as f64).sqrt(),
            ScoreScale::HeadDim => 1.0 / ((d_model / heads) as f64).sqrt(),
        }
    }
}

/// Shape of a multihead attention layer.
#[derive(Debug, Clone)]
pub struct MultiheadAttention {
    pub name: String,
    pub d_q: usize,
    pub d_k: usize,
    pub d_v: usize,
    /// Width of the concatenated heads, `heads * d_head`.
    pub d_model: usize,
    pub d_out: usize,
    pub heads: usize,
    pub scale: ScoreScale,
}

/// Result of one attention call: the output plus per-head attention
/// weights `[Nq, Nk]` and per-head outputs `[Nq, d_head]` before `Wo`.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub out: NodeId,
    pub weights: Vec<NodeId>,
    pub heads: Vec<NodeId>,
}

fn check_heads(name: &str, d_model: usize, heads: usize) -> Result<()> {
    if heads == 0 || d_model % heads != 0 {
        return Err(Error::Config(format!(
            "`{name}`: model dim {d_model} not divisible by {heads} heads"
        )));
    }
    Ok(())
}

fn check_width(g: &Graph, x: NodeId, width: usize, what: &str) -> Result<()> {
    let s = g.shape(x);
    if s.len() != 2 || s[1] != width {
        return Err(Error::invalid(
            "attention",
            format!("{what} must be [n, {width}], got {s:?}"),
        ));
    }
    Ok(())
}

/// Per-head softmax weights for projected queries and keys.
#[allow(clippy::too_many_arguments)]
fn head_weights(
    g: &mut Graph,
    qp: NodeId,
    kp: NodeId,
    h: usize,
    dh: usize,
    c: f64,
    mask: Option<&FrameMask>,
    empty: EmptyRows,
) -> Result<NodeId> {
    let qh = g.slice(qp, 1, h * dh, dh)?;
    let kh = g.slice(kp, 1, h * dh, dh)?;
    let kt = g.transpose(kh)?;
    let s = g.matmul(qh, kt)?;
    let s = g.scale(s, c);
    match mask {
        None => g.softmax_rows(s),
        Some(m) => g.masked_softmax_rows(s, &|i, j| m.allows(i, j), empty),
    }
}

impl MultiheadAttention {
    /// Self-attention shaped layer: all inputs and the output have width `d`.
    pub fn square(name: impl Into<String>, d: usize, heads: usize) -> Result<Self> {
        Self::new(name, [d, d, d], d, d, heads)
    }

    pub fn new(
        name: impl Into<String>,
        d_in: [usize; 3],
        d_model: usize,
        d_out: usize,
        heads: usize,
    ) -> Result<Self> {
        let name = name.into();
        check_heads(&name, d_model, heads)?;
        Ok(MultiheadAttention {
            name,
            d_q: d_in[0],
            d_k: d_in[1],
            d_v: d_in[2],
            d_model,
            d_out,
            heads,
            scale: ScoreScale::default(),
        })
    }

    pub fn with_scale(mut self, scale: ScoreScale) -> Self {
        self.scale = scale;
        self
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn param_name(&self, which: &str) -> String {
        format!("{}.{which}", self.name)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        store.insert(self.param_name("wq"), xavier(rng, self.d_q, self.d_model))?;
        store.insert(self.param_name("wk"), xavier(rng, self.d_k, self.d_model))?;
        store.insert(self.param_name("wv"), xavier(rng, self.d_v, self.d_model))?;
        store.insert(self.param_name("wo"), xavier(rng, self.d_model, self.d_out))
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        q: NodeId,
        k: NodeId,
        v: NodeId,
    ) -> Result<AttentionOutput> {
        self.run(g, store, q, k, v, None, EmptyRows::Error)
    }

    /// Attention restricted by `mask`. Rows without any permitted key fail
    /// with [`EmptyRows::Error`] or come out as zero with [`EmptyRows::Zero`].
    #[allow(clippy::too_many_arguments)]
    pub fn forward_masked(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        mask: &FrameMask,
        empty: EmptyRows,
    ) -> Result<AttentionOutput> {
        self.run(g, store, q, k, v, Some(mask), empty)
    }

    #[allow(clippy::too_many_arguments)]
    fn run(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        mask: Option<&FrameMask>,
        empty: EmptyRows,
    ) -> Result<AttentionOutput> {
        check_width(g, q, self.d_q, "queries")?;
        check_width(g, k, self.d_k, "keys")?;
        check_width(g, v, self.d_v, "values")?;
        if g.shape(k)[0] != g.shape(v)[0] {
            return Err(Error::shape("attention", g.shape(k), g.shape(v)));
        }
        let wq = g.param(store, &self.param_name("wq"))?;
        let wk = g.param(store, &self.param_name("wk"))?;
        let wv = g.param(store, &self.param_name("wv"))?;
        let wo = g.param(store, &self.param_name("wo"))?;
        let qp = g.matmul(q, wq)?;
        let kp = g.matmul(k, wk)?;
        let vp = g.matmul(v, wv)?;
        let dh = self.d_head();
        let c = self.scale.factor(self.d_model, self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let a = head_weights(g, qp, kp, h, dh, c, mask, empty)?;
            let vh = g.slice(vp, 1, h * dh, dh)?;
            heads.push(g.matmul(a, vh)?);
            weights.push(a);
        }
        let cat = g.concat(&heads, 1)?;
        let out = g.matmul(cat, wo)?;
        Ok(AttentionOutput {
            out,
            weights,
            heads,
        })
    }
}

/// Query-to-key affinity without value or output projections: one
/// row-stochastic `[Nq, Nk]` map per head.
#[derive(Debug, Clone)]
pub struct Affinity {
    pub name: String,
    pub d_q: usize,
    pub d_k: usize,
    pub d_model: usize,
    pub heads: usize,
    pub scale: ScoreScale,
}

impl Affinity {
    pub fn new(
        name: impl Into<String>,
        d_q: usize,
        d_k: usize,
        d_model: usize,
        heads: usize,
    ) -> Result<Self> {
        let name = name.into();
        check_heads(&name, d_model, heads)?;
        Ok(Affinity {
            name,
            d_q,
            d_k,
            d_model,
            heads,
            scale: ScoreScale::default(),
        })
    }

    pub fn with_scale(mut self, scale: ScoreScale) -> Self {
        self.scale = scale;
        self
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        store.insert(
            format!("{}.wq", self.name),
            xavier(rng, self.d_q, self.d_model),
        )?;
        store.insert(
            format!("{}.wk", self.name),
            xavier(rng, self.d_k, self.d_model),
        )
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        q: NodeId,
        k: NodeId,
    ) -> Result<Vec<NodeId>> {
        check_width(g, q, self.d_q, "queries")?;
        check_width(g, k, self.d_k, "keys")?;
        let wq = g.param(store, &format!("{}.wq", self.name))?;
        let wk = g.param(store, &format!("{}.wk", self.name))?;
        let qp = g.matmul(q, wq)?;
        let kp = g.matmul(k, wk)?;
        let dh = self.d_model / self.heads;
        let c = self.scale.factor(self.d_model, self.heads);
        (0..self.heads)
            .map(|h| head_weights(g, qp, kp, h, dh, c, None, EmptyRows::Error))
            .collect()
    }
}
