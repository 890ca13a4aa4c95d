//! Full model assembly: backbone, encoder, pixel and query decoders, task
//! head and optional label propagation.

pub mod backbone;
pub mod config;
pub mod head;
pub mod loss;
pub mod trainer;

use crate::attention::PositionalEncoding;
use crate::autodiff::{Graph, NodeId, ParamStore};
use crate::decoder::{DecoderOutput, PixelDecoder, QueryDecoder, QueryDecoderConfig};
use crate::encoder::{Encoder, EncoderConfig, EncoderLevel};
use crate::error::{Error, Result};
use crate::labelprop::{LabelPropConfig, LabelPropOutput, LabelPropagator};
use crate::rng::Rng;
use crate::tensor::{resize_bilinear, Tensor};

pub use backbone::{Backbone, STRIDES};
pub use config::{Config, ModelConfig, TrainConfig};
pub use head::TaskHead;
pub use loss::{loss_and_grad, segmentation_loss, LossConfig, LossParts};
pub use trainer::{train, Sample, Stage, TrainLog, TrainOutcome};

/// Parameter prefix owned by label propagation; stage 2 trains only these.
pub const LABELPROP_PREFIX: &str = "lp.";

#[derive(Debug, Clone)]
pub struct MedVt {
    pub cfg: ModelConfig,
    backbone: Backbone,
    pes: Vec<PositionalEncoding>,
    encoder: Encoder,
    pixel: PixelDecoder,
    decoder: QueryDecoder,
    head: TaskHead,
    labelprop: Option<LabelPropagator>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Encoder tokens per scale, fine to coarse, `[T*H_s*W_s, d]`.
    pub encoded: Vec<NodeId>,
    /// Pixel-decoder maps per scale, `[T,H_s,W_s,d]`.
    pub pixel: Vec<NodeId>,
    pub decoder: DecoderOutput,
    /// `Y′: [T,H_1,W_1,C]`.
    pub initial: NodeId,
    pub labelprop: Option<LabelPropOutput>,
}

impl ForwardOutput {
    /// `Ŷ` when label propagation ran, else `Y′`.
    pub fn prediction(&self) -> NodeId {
        self.labelprop
            .as_ref()
            .map_or(self.initial, |lp| lp.combined)
    }
}

impl MedVt {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let backbone = Backbone::new("bb", cfg.in_channels, cfg.widths, cfg.temporal_stem)?;
        let pes = (1..=4)
            .map(|s| {
                let [h, w] = cfg.grid(s);
                PositionalEncoding::new(format!("pe.s{s}"), cfg.pe, [cfg.frames, h, w], cfg.d)
            })
            .collect();
        let levels = (1..=4)
            .map(|s| EncoderLevel {
                scale: s,
                channels: cfg.widths[s - 1],
                blocks: cfg.blocks_per_scale.get(&s).copied().unwrap_or(0),
            })
            .collect();
        let encoder = Encoder::new(
            "enc",
            EncoderConfig {
                d: cfg.d,
                heads: cfg.heads,
                levels,
                between_ffn: cfg.between_ffn,
                score_scale: cfg.score_scale,
            },
        )?;
        let pixel = PixelDecoder::new("pd", &[cfg.d; 4], cfg.d);
        let decoder = QueryDecoder::new(
            "dec",
            QueryDecoderConfig {
                d: cfg.d,
                heads: cfg.heads,
                iterations: cfg.iterations,
                scales: cfg.decoder_scales.clone(),
                n_queries: cfg.n_queries,
                frames: cfg.frames,
                query_pe: cfg.query_pe,
                map_mode: cfg.map_mode,
                score_scale: cfg.score_scale,
            },
        )?;
        let d_feat = cfg.d + cfg.heads;
        let head = TaskHead::new("head", d_feat, cfg.head_width, cfg.classes)?;
        let labelprop = if cfg.label_prop {
            Some(LabelPropagator::new(
                LABELPROP_PREFIX.trim_end_matches('.'),
                LabelPropConfig {
                    d_feat,
                    d_model: cfg.d,
                    heads: cfg.heads,
                    d_label: cfg.d_label,
                    classes: cfg.classes,
                    rule: cfg.rule,
                    combine: cfg.combine,
                    score_scale: cfg.score_scale,
                },
            )?)
        } else {
            None
        };
        Ok(MedVt {
            cfg,
            backbone,
            pes,
            encoder,
            pixel,
            decoder,
            head,
            labelprop,
        })
    }

    /// Fresh parameters drawn from `seed`. Each component gets its own
    /// stream, so adding label propagation leaves the trunk init unchanged.
    pub fn init(&self, seed: u64) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        let root = Rng::new(seed);
        self.backbone.init(&mut store, &mut root.fork(1))?;
        let mut r = root.fork(2);
        for pe in &self.pes {
            pe.init(&mut store, &mut r)?;
        }
        self.encoder.init(&mut store, &mut root.fork(3))?;
        self.pixel.init(&mut store, &mut root.fork(4))?;
        self.decoder.init(&mut store, &mut root.fork(5))?;
        self.head.init(&mut store, &mut root.fork(6))?;
        if let Some(lp) = &self.labelprop {
            lp.init(&mut store, &mut root.fork(7))?;
        }
        Ok(store)
    }

    pub fn has_labelprop(&self) -> bool {
        self.labelprop.is_some()
    }

    pub fn labelprop(&self) -> Option<&LabelPropagator> {
        self.labelprop.as_ref()
    }

    pub fn decoder(&self) -> &QueryDecoder {
        &self.decoder
    }

    /// Runs the network on `clip: [T,H,W,C_in]`. Label propagation runs only
    /// when the model has it and `propagate` is set.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        clip: NodeId,
        propagate: bool,
    ) -> Result<ForwardOutput> {
        let s = g.shape(clip).to_vec();
        if s.len() != 4 || s[3] != self.cfg.in_channels {
            return Err(Error::invalid(
                "model",
                format!("expects [T,H,W,{}], got {s:?}", self.cfg.in_channels),
            ));
        }
        let t = s[0];
        let feats = self.backbone.forward(g, store, clip)?;
        let mut pes = Vec::with_capacity(4);
        for (pe, &f) in self.pes.iter().zip(&feats) {
            let fs = g.shape(f);
            let (h, w) = (fs[1], fs[2]);
            pes.push(pe.forward(g, store, t, h, w)?);
        }
        let encoded = self.encoder.encode(g, store, &feats, &pes)?;
        let mut grids = Vec::with_capacity(4);
        for (&x, &f) in encoded.iter().zip(&feats) {
            let fs = g.shape(f).to_vec();
            grids.push(g.reshape(x, &[fs[0], fs[1], fs[2], self.cfg.d])?);
        }
        let pixel = self.pixel.forward(g, store, &grids)?;
        let decoder = self.decoder.forward(g, store, &pixel, &pes)?;
        let initial = self.head.forward(g, store, decoder.features)?;
        let labelprop = match (&self.labelprop, propagate) {
            (Some(lp), true) => Some(lp.forward(g, store, decoder.features, initial)?),
            _ => None,
        };
        Ok(ForwardOutput {
            encoded,
            pixel,
            decoder,
            initial,
            labelprop,
        })
    }

    /// Prediction logits at the finest feature scale, `[T,H/4,W/4,C]`.
    pub fn coarse_logits(&self, store: &ParamStore, clip: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.input(clip.clone());
        let out = self.forward(&mut g, store, x, true)?;
        Ok(g.value(out.prediction()).clone())
    }

    /// Prediction logits bilinearly upsampled to `[T,out_h,out_w,C]`.
    pub fn logits_at(
        &self,
        store: &ParamStore,
        clip: &Tensor,
        out_h: usize,
        out_w: usize,
    ) -> Result<Tensor> {
        resize_bilinear(&self.coarse_logits(store, clip)?, out_h, out_w)
    }

    /// Prediction logits at the clip's own resolution.
    pub fn logits(&self, store: &ParamStore, clip: &Tensor) -> Result<Tensor> {
        self.logits_at(store, clip, clip.dim(1), clip.dim(2))
    }
}
