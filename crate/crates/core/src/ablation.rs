//! Encoder/decoder scale and propagation-rule ablations on synthetic clips.
//!
//! Per seed, three label-free models are trained through stage 1: a
//! single-scale baseline, the same with the multiscale decoder, and the full
//! multiscale encoder-decoder. Propagation variants then run stage 2 on top of
//! the last trunk. Parameter initialisation draws each component from its own
//! stream, so this trunk is exactly the one the complete model would have
//! trained in its own stage 1.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::attention::MaskRule;
use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::model::trainer::run_stage;
use crate::model::{Config, MedVt, ModelConfig, Sample, Stage, TrainLog};
use crate::pipeline::evaluate_scenes;
use crate::synthclip::{generate_split, GenOptions, Scene, SceneSpec, Split};

/// Allowed shortfall in every ordering comparison.
pub const ORDER_SLACK: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct AblationOptions {
    pub config: Config,
    pub seeds: Vec<u64>,
    pub data_seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub gen: GenOptions,
}

impl Default for AblationOptions {
    fn default() -> Self {
        AblationOptions {
            config: Config::preset("desk").expect("built-in preset"),
            seeds: vec![0, 1, 2],
            data_seed: 1,
            n_train: 8,
            n_val: 4,
            gen: GenOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    /// `scales` or `propagation`.
    pub table: &'static str,
    pub variant: String,
    pub encoder_scales: Vec<usize>,
    pub decoder_scales: Vec<usize>,
    pub propagation: Option<MaskRule>,
    /// Validation mIoU per seed, in seed order.
    pub miou: Vec<f64>,
    pub mean_miou: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Ordering {
    pub full_vs_without_propagation: bool,
    pub without_propagation_vs_baseline: bool,
    pub mtom_vs_mto1: bool,
    pub slack: f64,
}

impl Ordering {
    pub fn holds(&self) -> bool {
        self.full_vs_without_propagation
            && self.without_propagation_vs_baseline
            && self.mtom_vs_mto1
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
    pub ordering: Ordering,
}

impl AblationReport {
    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<12} {:<14} {:<10} {:<10} {:<6} {:>8}  per seed\n",
            "table", "variant", "encoder", "decoder", "prop", "mIoU"
        );
        for r in &self.rows {
            let scales = |v: &[usize]| {
                v.iter()
                    .map(|s| s.to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            };
            out.push_str(&format!(
                "{:<12} {:<14} {:<10} {:<10} {:<6} {:>8.4}  {}\n",
                r.table,
                r.variant,
                scales(&r.encoder_scales),
                scales(&r.decoder_scales),
                r.propagation.map_or("-", MaskRule::label),
                r.mean_miou,
                r.miou
                    .iter()
                    .map(|m| format!("{m:.4}"))
                    .collect::<Vec<_>>()
                    .join(" ")
            ));
        }
        let o = &self.ordering;
        out.push_str(&format!(
            "ordering (slack {}): full>=woLP {}  woLP>=baseline {}  MtoM>=Mto1 {}\n",
            o.slack,
            o.full_vs_without_propagation,
            o.without_propagation_vs_baseline,
            o.mtom_vs_mto1
        ));
        out
    }
}

struct Variant {
    table: &'static str,
    name: &'static str,
    model: ModelConfig,
}

/// Label-free trunks, coarse-only first. The baseline encodes only the
/// coarsest encoded scale and decodes only the coarsest decoder scale.
fn trunk_variants(full: &ModelConfig) -> Result<Vec<Variant>> {
    let coarsest = *full
        .blocks_per_scale
        .iter()
        .filter(|(_, &b)| b > 0)
        .map(|(s, _)| s)
        .max()
        .ok_or_else(|| Error::Config("ablation needs at least one encoded scale".into()))?;
    let single_enc = BTreeMap::from([(coarsest, full.blocks_per_scale[&coarsest])]);
    let single_dec = vec![full.decoder_scales[0]];
    let trunk = ModelConfig {
        label_prop: false,
        ..full.clone()
    };
    Ok(vec![
        Variant {
            table: "scales",
            name: "baseline",
            model: ModelConfig {
                blocks_per_scale: single_enc.clone(),
                decoder_scales: single_dec,
                ..trunk.clone()
            },
        },
        Variant {
            table: "scales",
            name: "+MS decoder",
            model: ModelConfig {
                blocks_per_scale: single_enc,
                ..trunk.clone()
            },
        },
        Variant {
            table: "scales",
            name: "+MS encoder",
            model: trunk,
        },
    ])
}

fn encoded_scales(m: &ModelConfig) -> Vec<usize> {
    m.blocks_per_scale
        .iter()
        .filter(|(_, &b)| b > 0)
        .map(|(&s, _)| s)
        .collect()
}

fn val_miou(model: &MedVt, store: &ParamStore, val: &[(SceneSpec, Scene)]) -> Result<f64> {
    let cats: Vec<String> = val.iter().map(|(spec, _)| spec.shape.to_string()).collect();
    let scenes: Vec<(&str, &Scene)> = cats
        .iter()
        .map(String::as_str)
        .zip(val.iter().map(|(_, s)| s))
        .collect();
    Ok(evaluate_scenes(model, store, &scenes, &[1.0])?.j_mean)
}

/// Trains and scores every variant for every seed.
pub fn run_ablation(opts: &AblationOptions) -> Result<AblationReport> {
    if opts.seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let gen = GenOptions {
        height: opts.config.model.input[0],
        width: opts.config.model.input[1],
        ..opts.gen.clone()
    };
    let train: Vec<Sample> = generate_split(opts.n_train, opts.data_seed, Split::Train, &gen)?
        .iter()
        .map(|(_, s)| s.to_sample())
        .collect();
    let val = generate_split(opts.n_val, opts.data_seed, Split::Val, &gen)?;

    let variants = trunk_variants(&opts.config.model)?;
    let rules = [
        ("Mto1", MaskRule::ManyToOne),
        ("MtoM", MaskRule::ManyToMany),
    ];
    let mut trunk_miou = vec![Vec::new(); variants.len()];
    let mut rule_miou = vec![Vec::new(); rules.len()];
    for &seed in &opts.seeds {
        let mut cfg = opts.config.clone();
        cfg.train.seed = seed;
        let mut trunk = ParamStore::new();
        for (i, v) in variants.iter().enumerate() {
            let model = MedVt::new(v.model.clone())?;
            let mut store = model.init(seed)?;
            run_stage(
                &model,
                &mut store,
                &train,
                &cfg,
                Stage::One,
                cfg.train.iters,
                &mut TrainLog::default(),
            )?;
            store.set_all_trainable(true);
            trunk_miou[i].push(val_miou(&model, &store, &val)?);
            trunk = store;
        }
        for (i, &(_, rule)) in rules.iter().enumerate() {
            let model = MedVt::new(ModelConfig {
                label_prop: true,
                rule,
                ..opts.config.model.clone()
            })?;
            let mut store = model.init(seed)?;
            for (name, p) in trunk.iter() {
                store.set(name, p.value.clone())?;
            }
            run_stage(
                &model,
                &mut store,
                &train,
                &cfg,
                Stage::Two,
                cfg.train.stage2_iters,
                &mut TrainLog::default(),
            )?;
            store.set_all_trainable(true);
            rule_miou[i].push(val_miou(&model, &store, &val)?);
        }
    }

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let full = &opts.config.model;
    let mut rows: Vec<AblationRow> = variants
        .iter()
        .zip(&trunk_miou)
        .map(|(v, m)| AblationRow {
            table: v.table,
            variant: v.name.to_owned(),
            encoder_scales: encoded_scales(&v.model),
            decoder_scales: v.model.decoder_scales.clone(),
            propagation: None,
            miou: m.clone(),
            mean_miou: mean(m),
        })
        .collect();
    let prop_row = |table: &'static str, variant: &str, i: usize| AblationRow {
        table,
        variant: variant.to_owned(),
        encoder_scales: encoded_scales(full),
        decoder_scales: full.decoder_scales.clone(),
        propagation: Some(rules[i].1),
        miou: rule_miou[i].clone(),
        mean_miou: mean(&rule_miou[i]),
    };
    rows.push(prop_row("scales", "+LP", 1));
    rows.push(prop_row("propagation", "Mto1", 0));
    rows.push(prop_row("propagation", "MtoM", 1));

    let m = |name: &str| {
        rows.iter()
            .find(|r| r.variant == name)
            .map_or(f64::NAN, |r| r.mean_miou)
    };
    let ordering = Ordering {
        full_vs_without_propagation: m("+LP") >= m("+MS encoder") - ORDER_SLACK,
        without_propagation_vs_baseline: m("+MS encoder") >= m("baseline") - ORDER_SLACK,
        mtom_vs_mto1: m("MtoM") >= m("Mto1") - ORDER_SLACK,
        slack: ORDER_SLACK,
    };
    Ok(AblationReport {
        seeds: opts.seeds.clone(),
        rows,
        ordering,
    })
}
