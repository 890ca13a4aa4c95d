//! Model, loss and training configuration with named presets and a flat
//! `key=value` file format.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use crate::attention::{MaskRule, PeKind, ScoreScale};
use crate::decoder::MapMode;
use crate::error::{Error, Result};
use crate::labelprop::Combine;
use crate::model::loss::LossConfig;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelConfig {
    /// Input `[H, W]`; both must be multiples of 32.
    pub input: [usize; 2],
    pub in_channels: usize,
    pub widths: [usize; 4],
    /// Stem convolution spans three frames.
    pub temporal_stem: bool,
    pub d: usize,
    pub heads: usize,
    pub frames: usize,
    /// Within-scale block count per scale id; scales absent here are
    /// projected but not encoded.
    pub blocks_per_scale: BTreeMap<usize, usize>,
    pub between_ffn: bool,
    /// Scale ids read by the query decoder, coarse to fine.
    pub decoder_scales: Vec<usize>,
    pub iterations: usize,
    pub n_queries: usize,
    pub pe: PeKind,
    pub query_pe: PeKind,
    pub map_mode: MapMode,
    pub score_scale: ScoreScale,
    pub d_label: usize,
    pub classes: usize,
    pub head_width: usize,
    pub label_prop: bool,
    pub rule: MaskRule,
    pub combine: Combine,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub iters: usize,
    pub stage2_iters: usize,
    pub batch: usize,
    /// Exponent of the polynomial learning-rate decay to zero.
    pub lr_power: f64,
    pub flip: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Config {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

impl ModelConfig {
    /// 64×64 clips of 4 frames; encoder on the two coarsest scales.
    pub fn desk() -> Self {
        ModelConfig {
            input: [64, 64],
            in_channels: 3,
            widths: [16, 32, 64, 64],
            temporal_stem: true,
            d: 48,
            heads: 4,
            frames: 4,
            blocks_per_scale: BTreeMap::from([(4, 2), (3, 1)]),
            between_ffn: true,
            decoder_scales: vec![4, 3, 2],
            iterations: 3,
            n_queries: 4,
            pe: PeKind::Sinusoidal,
            query_pe: PeKind::Learnable,
            map_mode: MapMode::FrameSlice,
            score_scale: ScoreScale::ModelDim,
            d_label: 16,
            classes: 2,
            head_width: 32,
            label_prop: true,
            rule: MaskRule::ManyToMany,
            combine: Combine::Logits,
        }
    }

    /// Full-size dimensions; only meant for shape traces.
    pub fn paper() -> Self {
        ModelConfig {
            input: [384, 640],
            widths: [256, 512, 1024, 2048],
            d: 384,
            heads: 8,
            frames: 6,
            blocks_per_scale: BTreeMap::from([(4, 6), (3, 1)]),
            n_queries: 6,
            d_label: 16,
            head_width: 256,
            ..ModelConfig::desk()
        }
    }

    /// Smallest model the gradient suite differentiates end to end.
    pub fn micro() -> Self {
        ModelConfig {
            input: [32, 32],
            widths: [4, 8, 8, 8],
            d: 8,
            heads: 2,
            frames: 2,
            blocks_per_scale: BTreeMap::from([(4, 1), (3, 1)]),
            decoder_scales: vec![4, 3, 2],
            iterations: 1,
            n_queries: 2,
            pe: PeKind::Learnable,
            d_label: 4,
            head_width: 4,
            ..ModelConfig::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            "micro" => Ok(Self::micro()),
            _ => Err(Error::Config(format!(
                "unknown preset `{name}` (desk, paper, micro)"
            ))),
        }
    }

    /// Spatial size of scale `s` (1-based).
    pub fn grid(&self, s: usize) -> [usize; 2] {
        let st = crate::model::backbone::STRIDES[s - 1];
        [self.input[0] / st, self.input[1] / st]
    }

    pub fn validate(&self) -> Result<()> {
        if self.input.iter().any(|&v| v == 0 || v % 32 != 0) {
            return Err(Error::Config(format!(
                "input {:?} must be positive multiples of 32",
                self.input
            )));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "d={} not divisible by N_h={}",
                self.d, self.heads
            )));
        }
        if self.frames == 0 {
            return Err(Error::Config("T must be at least 1".into()));
        }
        if self.blocks_per_scale.is_empty()
            || self.blocks_per_scale.keys().any(|&s| !(1..=4).contains(&s))
        {
            return Err(Error::Config(format!(
                "blocks_per_scale {:?} must name scales 1..4",
                self.blocks_per_scale
            )));
        }
        if self.blocks_per_scale.values().any(|&b| b == 0) {
            return Err(Error::Config(
                "every encoded scale needs at least one block".into(),
            ));
        }
        if self.decoder_scales.iter().any(|&s| !(1..=4).contains(&s)) {
            return Err(Error::Config(format!(
                "decoder_scales {:?} must lie in 1..4",
                self.decoder_scales
            )));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            lr: 1e-3,
            weight_decay: 1e-4,
            iters: 500,
            stage2_iters: 100,
            batch: 4,
            lr_power: 3.0,
            flip: true,
        }
    }
}

impl Config {
    pub fn preset(name: &str) -> Result<Self> {
        Ok(Config {
            model: ModelConfig::preset(name)?,
            loss: LossConfig::default(),
            train: TrainConfig::default(),
        })
    }

    /// Applies one `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let l = &mut self.loss;
        let t = &mut self.train;
        let v = value.trim();
        match key.trim() {
            "input" => m.input = parse_pair(v)?,
            "in_channels" => m.in_channels = num(key, v)?,
            "widths" => {
                let w: Vec<usize> = list(key, v)?;
                m.widths = w
                    .try_into()
                    .map_err(|_| Error::Config(format!("widths needs four values, got `{v}`")))?;
            }
            "temporal_stem" => m.temporal_stem = flag(key, v)?,
            "d" => m.d = num(key, v)?,
            "N_h" => m.heads = num(key, v)?,
            "T" => m.frames = num(key, v)?,
            "blocks_per_scale" => m.blocks_per_scale = parse_blocks(v)?,
            "between_ffn" => m.between_ffn = flag(key, v)?,
            "decoder_scales" => m.decoder_scales = list(key, v)?,
            "N_d" => m.iterations = num(key, v)?,
            "N_q" => m.n_queries = num(key, v)?,
            "pe" => m.pe = v.parse()?,
            "query_pe" => m.query_pe = v.parse()?,
            "map_mode" => {
                m.map_mode = match v {
                    "frame" => MapMode::FrameSlice,
                    "mean" => MapMode::QueryMean,
                    _ => {
                        return Err(Error::Config(format!(
                            "map_mode must be frame or mean, got `{v}`"
                        )))
                    }
                }
            }
            "score_scale" => {
                m.score_scale = match v {
                    "model" => ScoreScale::ModelDim,
                    "head" => ScoreScale::HeadDim,
                    _ => {
                        return Err(Error::Config(format!(
                            "score_scale must be model or head, got `{v}`"
                        )))
                    }
                }
            }
            "D" => m.d_label = num(key, v)?,
            "C_cls" => m.classes = num(key, v)?,
            "head_width" => m.head_width = num(key, v)?,
            "label_prop" => m.label_prop = flag(key, v)?,
            "rule" => {
                m.rule = match v {
                    "mtom" => MaskRule::ManyToMany,
                    "mto1" => MaskRule::ManyToOne,
                    "full" => MaskRule::Full,
                    _ => {
                        return Err(Error::Config(format!(
                            "rule must be mtom, mto1 or full, got `{v}`"
                        )))
                    }
                }
            }
            "combine" => {
                m.combine = match v {
                    "logits" => Combine::Logits,
                    "probs" => Combine::Probs,
                    _ => {
                        return Err(Error::Config(format!(
                            "combine must be logits or probs, got `{v}`"
                        )))
                    }
                }
            }
            "focal_alpha" => l.focal_alpha = num(key, v)?,
            "focal_gamma" => l.focal_gamma = num(key, v)?,
            "dice_eps" => l.dice_eps = num(key, v)?,
            "lambda_focal" => l.lambda_focal = num(key, v)?,
            "lambda_dice" => l.lambda_dice = num(key, v)?,
            "seed" => t.seed = num(key, v)?,
            "lr" => t.lr = num(key, v)?,
            "weight_decay" => t.weight_decay = num(key, v)?,
            "iters" => t.iters = num(key, v)?,
            "stage2_iters" => t.stage2_iters = num(key, v)?,
            "batch" => t.batch = num(key, v)?,
            "lr_power" => t.lr_power = num(key, v)?,
            "flip" => t.flip = flag(key, v)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Parses a flat config file. A `preset` line, if present, must come
    /// first and selects the starting point; otherwise `desk` is used.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg: Option<Config> = None;
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got `{line}`", no + 1))
            })?;
            if k.trim() == "preset" {
                if cfg.is_some() {
                    return Err(Error::Config(format!(
                        "line {}: preset must come first",
                        no + 1
                    )));
                }
                cfg = Some(Config::preset(v.trim())?);
                continue;
            }
            let c = cfg.get_or_insert_with(|| Config::preset("desk").expect("desk preset"));
            c.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", no + 1)))?;
        }
        let cfg = cfg.unwrap_or_else(|| Config::preset("desk").expect("desk preset"));
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let l = &self.loss;
        if [
            l.focal_alpha,
            l.focal_gamma,
            l.dice_eps,
            l.lambda_focal,
            l.lambda_dice,
        ]
        .iter()
        .any(|v| *v < 0.0 || !v.is_finite())
        {
            return Err(Error::Config(
                "loss weights must be finite and nonnegative".into(),
            ));
        }
        if l.lambda_focal == 0.0 && l.lambda_dice == 0.0 {
            return Err(Error::Config(
                "lambda_focal and lambda_dice cannot both be zero".into(),
            ));
        }
        if self.train.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if self.train.lr < 0.0 || self.train.weight_decay < 0.0 {
            return Err(Error::Config(
                "lr and weight_decay must be nonnegative".into(),
            ));
        }
        Ok(())
    }

    /// The file form of this config; `parse(to_text())` round-trips.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let l = &self.loss;
        let t = &self.train;
        let join = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let blocks = m
            .blocks_per_scale
            .iter()
            .map(|(s, b)| format!("{s}:{b}"))
            .collect::<Vec<_>>()
            .join(",");
        let pe = |k: PeKind| {
            if k == PeKind::Learnable {
                "learnable"
            } else {
                "sinusoidal"
            }
        };
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        };
        kv("input", format!("{}x{}", m.input[0], m.input[1]));
        kv("in_channels", m.in_channels.to_string());
        kv("widths", join(&m.widths));
        kv("temporal_stem", m.temporal_stem.to_string());
        kv("d", m.d.to_string());
        kv("N_h", m.heads.to_string());
        kv("T", m.frames.to_string());
        kv("blocks_per_scale", blocks);
        kv("between_ffn", m.between_ffn.to_string());
        kv("decoder_scales", join(&m.decoder_scales));
        kv("N_d", m.iterations.to_string());
        kv("N_q", m.n_queries.to_string());
        kv("pe", pe(m.pe).into());
        kv("query_pe", pe(m.query_pe).into());
        kv(
            "map_mode",
            if m.map_mode == MapMode::FrameSlice {
                "frame"
            } else {
                "mean"
            }
            .into(),
        );
        kv(
            "score_scale",
            if m.score_scale == ScoreScale::ModelDim {
                "model"
            } else {
                "head"
            }
            .into(),
        );
        kv("D", m.d_label.to_string());
        kv("C_cls", m.classes.to_string());
        kv("head_width", m.head_width.to_string());
        kv("label_prop", m.label_prop.to_string());
        kv("rule", m.rule.label().to_ascii_lowercase());
        kv(
            "combine",
            if m.combine == Combine::Logits {
                "logits"
            } else {
                "probs"
            }
            .into(),
        );
        kv("focal_alpha", l.focal_alpha.to_string());
        kv("focal_gamma", l.focal_gamma.to_string());
        kv("dice_eps", l.dice_eps.to_string());
        kv("lambda_focal", l.lambda_focal.to_string());
        kv("lambda_dice", l.lambda_dice.to_string());
        kv("seed", t.seed.to_string());
        kv("lr", t.lr.to_string());
        kv("weight_decay", t.weight_decay.to_string());
        kv("iters", t.iters.to_string());
        kv("stage2_iters", t.stage2_iters.to_string());
        kv("batch", t.batch.to_string());
        kv("lr_power", t.lr_power.to_string());
        kv("flip", t.flip.to_string());
        out
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}` expects a number, got `{v}`")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!(
            "`{key}` expects true or false, got `{v}`"
        ))),
    }
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|p| num(key, p.trim())).collect()
}

fn parse_pair(v: &str) -> Result<[usize; 2]> {
    let (a, b) = v
        .split_once('x')
        .ok_or_else(|| Error::Config(format!("`input` expects HxW, got `{v}`")))?;
    Ok([num("input", a.trim())?, num("input", b.trim())?])
}

/// `"4:2,3:1"` → `{4: 2, 3: 1}`.
fn parse_blocks(v: &str) -> Result<BTreeMap<usize, usize>> {
    let mut out = BTreeMap::new();
    for part in v.split(',') {
        let (s, b) = part.split_once(':').ok_or_else(|| {
            Error::Config(format!(
                "`blocks_per_scale` expects scale:count pairs, got `{v}`"
            ))
        })?;
        out.insert(
            num("blocks_per_scale", s.trim())?,
            num("blocks_per_scale", b.trim())?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        for p in ["desk", "paper", "micro"] {
            let cfg = Config::preset(p).unwrap();
            assert_eq!(Config::parse(&cfg.to_text()).unwrap(), cfg);
        }
    }

    #[test]
    fn overrides_and_comments() {
        let cfg =
            Config::parse("preset=micro\n# comment\nlr = 0.01\nN_q=1 # per clip\nrule=mto1\n")
                .unwrap();
        assert_eq!(cfg.model.d, 8);
        assert_eq!(cfg.train.lr, 0.01);
        assert_eq!(cfg.model.n_queries, 1);
        assert_eq!(cfg.model.rule, MaskRule::ManyToOne);
    }

    #[test]
    fn malformed_files_are_rejected() {
        assert!(Config::parse("lr").is_err());
        assert!(Config::parse("bogus=1").is_err());
        assert!(Config::parse("d=abc").is_err());
        assert!(Config::parse("lr=0.1\npreset=desk").is_err());
        assert!(Config::parse("lambda_focal=0\nlambda_dice=0").is_err());
        assert!(Config::parse("input=48x64").is_err());
        assert!(Config::parse("d=50").is_err());
    }
}
