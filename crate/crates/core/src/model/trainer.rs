//! Two-stage training.
//!
//! Stage 1 trains everything except label propagation with the loss on `Y′`.
//! Stage 2 freezes that trunk and trains only the propagator with the loss
//! on `Ŷ`. Batches are evaluated in parallel and their gradients summed in
//! batch order, so results do not depend on the thread count.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::autodiff::{AdamW, AdamWConfig, Gradients, Graph, ParamStore};
use crate::error::{Error, Result};
use crate::model::config::Config;
use crate::model::loss::segmentation_loss;
use crate::model::{MedVt, LABELPROP_PREFIX};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// One training clip with a class index per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[T,H,W,C]` with values in `[0,1]`.
    pub clip: Tensor,
    /// `T*H*W` class indices.
    pub labels: Vec<usize>,
}

impl Sample {
    pub fn new(clip: Tensor, labels: Vec<usize>) -> Result<Self> {
        if clip.rank() != 4 || labels.len() != clip.len() / clip.dim(3) {
            return Err(Error::invalid(
                "sample",
                format!("clip {:?} with {} labels", clip.shape(), labels.len()),
            ));
        }
        Ok(Sample { clip, labels })
    }

    pub fn frames(&self) -> usize {
        self.clip.dim(0)
    }

    /// Frames `start..start + len`.
    pub fn window(&self, start: usize, len: usize) -> Result<Sample> {
        let per = self.labels.len() / self.frames();
        let clip = self.clip.slice(0, start, len)?;
        Ok(Sample {
            clip,
            labels: self.labels[start * per..(start + len) * per].to_vec(),
        })
    }

    pub fn flip_horizontal(&self) -> Sample {
        let s = self.clip.shape();
        let (t, h, w, c) = (s[0], s[1], s[2], s[3]);
        let src = self.clip.data();
        let mut data = vec![0.0; src.len()];
        let mut labels = vec![0; self.labels.len()];
        for r in 0..t * h {
            for x in 0..w {
                let (i, j) = (r * w + x, r * w + (w - 1 - x));
                data[i * c..(i + 1) * c].copy_from_slice(&src[j * c..(j + 1) * c]);
                labels[i] = self.labels[j];
            }
        }
        Sample {
            clip: Tensor::from_parts(s.to_vec(), data),
            labels,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Stage {
    One,
    Two,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainLog {
    pub rows: Vec<(usize, u8, f64)>,
}

impl TrainLog {
    pub fn stage_losses(&self, stage: Stage) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.1 == stage.number())
            .map(|r| r.2)
            .collect()
    }

    /// Consecutive pairs of `window`-iteration moving averages of the stage
    /// loss, and how many of them do not increase.
    pub fn nonincreasing_windows(&self, stage: Stage, window: usize) -> (usize, usize) {
        let ma = moving_average(&self.stage_losses(stage), window);
        let ok = ma.windows(2).filter(|p| p[1] <= p[0]).count();
        (ok, ma.len().saturating_sub(1))
    }

    /// `iter,stage,loss` with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,stage,loss\n");
        for (i, s, l) in &self.rows {
            let _ = writeln!(out, "{i},{s},{l:.17e}");
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: TrainLog,
}

pub fn moving_average(xs: &[f64], window: usize) -> Vec<f64> {
    if window == 0 {
        return Vec::new();
    }
    xs.windows(window)
        .map(|w| w.iter().sum::<f64>() / window as f64)
        .collect()
}

/// Polynomial decay `lr * (1 - it/total)^power`.
pub fn poly_lr(lr: f64, it: usize, total: usize, power: f64) -> f64 {
    if total == 0 {
        return lr;
    }
    lr * (1.0 - it as f64 / total as f64).max(0.0).powf(power)
}

/// Loss and gradients of one sample for the given stage.
pub fn sample_loss(
    model: &MedVt,
    store: &ParamStore,
    sample: &Sample,
    cfg: &Config,
    stage: Stage,
) -> Result<(f64, Gradients)> {
    let mut g = Graph::new();
    let x = g.input(sample.clip.clone());
    let out = model.forward(&mut g, store, x, stage == Stage::Two)?;
    let pred = match stage {
        Stage::One => out.initial,
        Stage::Two => out.prediction(),
    };
    let up = g.resize(pred, sample.clip.dim(1), sample.clip.dim(2))?;
    let (loss, parts) = segmentation_loss(&mut g, up, &sample.labels, &cfg.loss)?;
    Ok((parts.total, g.backward(loss)?.into_named()))
}

/// Trains `store` in place on `data`, stage 1 then stage 2.
///
/// Clips longer than `T` contribute every window, with and without a
/// horizontal flip when enabled. On a non-finite loss or gradient the store
/// is restored to the last good parameters and an error is returned.
pub fn train(
    model: &MedVt,
    store: &mut ParamStore,
    data: &[Sample],
    cfg: &Config,
) -> Result<TrainOutcome> {
    let mut log = TrainLog::default();
    run_stage(
        model,
        store,
        data,
        cfg,
        Stage::One,
        cfg.train.iters,
        &mut log,
    )?;
    if model.has_labelprop() && cfg.train.stage2_iters > 0 {
        run_stage(
            model,
            store,
            data,
            cfg,
            Stage::Two,
            cfg.train.stage2_iters,
            &mut log,
        )?;
    }
    store.set_all_trainable(true);
    Ok(TrainOutcome { log })
}

/// Every `(clip, window start, flip)` combination in one seeded order. A
/// stage cycles through this fixed order, so every run of `order.len()`
/// consecutive draws covers each combination exactly once.
fn sample_order(data: &[Sample], t: usize, flip: bool, mut rng: Rng) -> Vec<(usize, usize, bool)> {
    let flips: &[bool] = if flip { &[false, true] } else { &[false] };
    let mut order: Vec<(usize, usize, bool)> = data
        .iter()
        .enumerate()
        .flat_map(|(i, s)| {
            (0..=s.frames() - t).flat_map(move |st| flips.iter().map(move |&f| (i, st, f)))
        })
        .collect();
    for i in (1..order.len()).rev() {
        order.swap(i, rng.below(i + 1));
    }
    order
}

pub fn run_stage(
    model: &MedVt,
    store: &mut ParamStore,
    data: &[Sample],
    cfg: &Config,
    stage: Stage,
    iters: usize,
    log: &mut TrainLog,
) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let t = model.cfg.frames;
    if let Some(s) = data.iter().find(|s| s.frames() < t) {
        return Err(Error::Config(format!(
            "clip has {} frames, model needs T={t}",
            s.frames()
        )));
    }
    match stage {
        Stage::One => {
            store.set_all_trainable(true);
            store.set_trainable_prefix(LABELPROP_PREFIX, false);
        }
        Stage::Two => {
            store.set_all_trainable(false);
            store.set_trainable_prefix(LABELPROP_PREFIX, true);
        }
    }
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.train.lr,
        weight_decay: cfg.train.weight_decay,
        ..AdamWConfig::default()
    });
    let order = sample_order(
        data,
        t,
        cfg.train.flip,
        Rng::new(cfg.train.seed).fork(stage.number() as u64),
    );
    for it in 0..iters {
        let batch: Vec<Sample> = (0..cfg.train.batch)
            .map(|j| {
                let (clip, start, flip) = order[(it * cfg.train.batch + j) % order.len()];
                let w = data[clip].window(start, t)?;
                Ok(if flip { w.flip_horizontal() } else { w })
            })
            .collect::<Result<_>>()?;
        let snapshot: &ParamStore = store;
        let results: Vec<Result<(f64, Gradients)>> = batch
            .par_iter()
            .map(|s| sample_loss(model, snapshot, s, cfg, stage))
            .collect();
        let mut total = 0.0;
        let mut grads = Gradients::default();
        for r in results {
            let (l, g) = match r {
                Ok(v) => v,
                Err(Error::NonFinite(what)) => {
                    return Err(Error::NonFinite(format!(
                        "{what} at iteration {it}; parameters kept from the last good step"
                    )))
                }
                Err(e) => return Err(e),
            };
            total += l;
            grads.accumulate(&g)?;
        }
        let n = batch.len() as f64;
        grads.scale(1.0 / n);
        let loss = total / n;
        if !loss.is_finite() || !grads.all_finite() {
            return Err(Error::NonFinite(format!(
                "loss at iteration {it}; parameters kept from the last good step"
            )));
        }
        log.rows.push((it, stage.number(), loss));
        let lr = poly_lr(cfg.train.lr, it, iters, cfg.train.lr_power);
        let before = store.clone();
        opt.step_with_lr(store, &grads, lr)?;
        if store.iter().any(|(_, p)| !p.value.all_finite()) {
            *store = before;
            return Err(Error::NonFinite(format!(
                "parameters after iteration {it}; restored the last good step"
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::ModelConfig;

    fn toy_data(cfg: &ModelConfig, n: usize, frames: usize) -> Vec<Sample> {
        let [h, w] = cfg.input;
        let mut rng = Rng::new(11);
        (0..n)
            .map(|_| {
                let clip = rng.uniform_tensor(&[frames, h, w, 3], 0.0, 1.0);
                // Foreground wherever the red channel is bright.
                let labels = clip
                    .data()
                    .chunks(3)
                    .map(|p| usize::from(p[0] > 0.5))
                    .collect();
                Sample::new(clip, labels).unwrap()
            })
            .collect()
    }

    fn micro_config(iters: usize, stage2: usize) -> Config {
        let mut cfg = Config::preset("micro").unwrap();
        cfg.train.iters = iters;
        cfg.train.stage2_iters = stage2;
        cfg.train.batch = 2;
        cfg
    }

    #[test]
    fn zero_lr_leaves_parameters_bit_identical() {
        let mut cfg = micro_config(3, 2);
        cfg.train.lr = 0.0;
        let model = MedVt::new(cfg.model.clone()).unwrap();
        let mut store = model.init(1).unwrap();
        let before = store.clone();
        train(&model, &mut store, &toy_data(&cfg.model, 2, 2), &cfg).unwrap();
        for (name, p) in before.iter() {
            assert!(p.value.bit_eq(store.value(name).unwrap()), "{name}");
        }
    }

    #[test]
    fn stage_two_freezes_the_trunk() {
        let cfg = micro_config(0, 3);
        let model = MedVt::new(cfg.model.clone()).unwrap();
        let mut store = model.init(1).unwrap();
        let before = store.clone();
        let out = train(&model, &mut store, &toy_data(&cfg.model, 2, 3), &cfg).unwrap();
        assert_eq!(out.log.stage_losses(Stage::Two).len(), 3);
        let mut changed = 0;
        for (name, p) in before.iter() {
            let same = p.value.bit_eq(store.value(name).unwrap());
            if name.starts_with(LABELPROP_PREFIX) {
                changed += usize::from(!same);
            } else {
                assert!(same, "{name} moved in stage 2");
            }
        }
        assert!(changed > 0);
    }

    #[test]
    fn short_run_reduces_loss() {
        let mut cfg = micro_config(50, 0);
        cfg.train.lr = 3e-3;
        let model = MedVt::new(cfg.model.clone()).unwrap();
        let mut store = model.init(2).unwrap();
        let data = toy_data(&cfg.model, 4, 2);
        let out = train(&model, &mut store, &data, &cfg).unwrap();
        let l = out.log.stage_losses(Stage::One);
        let first = l[0];
        let last = l[l.len() - 5..].iter().sum::<f64>() / 5.0;
        assert!(last < first, "loss {first} -> {last}");
    }

    #[test]
    fn runs_are_deterministic() {
        let cfg = micro_config(4, 2);
        let model = MedVt::new(cfg.model.clone()).unwrap();
        let data = toy_data(&cfg.model, 3, 3);
        let run = || {
            let mut store = model.init(5).unwrap();
            let log = train(&model, &mut store, &data, &cfg).unwrap().log;
            (log.to_csv(), store)
        };
        let (a, sa) = run();
        let (b, sb) = run();
        assert_eq!(a, b);
        for (name, p) in sa.iter() {
            assert!(p.value.bit_eq(sb.value(name).unwrap()));
        }
    }

    #[test]
    fn non_finite_input_aborts_with_parameters_intact() {
        let cfg = micro_config(2, 0);
        let model = MedVt::new(cfg.model.clone()).unwrap();
        let mut store = model.init(1).unwrap();
        let before = store.clone();
        let mut data = toy_data(&cfg.model, 1, 2);
        let mut v = data[0].clip.data().to_vec();
        v[0] = f64::NAN;
        data[0].clip = Tensor::from_vec(data[0].clip.shape(), v).unwrap();
        let err = train(&model, &mut store, &data, &cfg).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)), "{err}");
        for (name, p) in before.iter() {
            assert!(p.value.bit_eq(store.value(name).unwrap()));
        }
    }

    #[test]
    fn moving_average_windows() {
        assert_eq!(
            moving_average(&[1.0, 3.0, 2.0, 6.0], 2),
            vec![2.0, 2.5, 4.0]
        );
        assert!(moving_average(&[1.0], 2).is_empty());
        let log = TrainLog {
            rows: [4.0, 3.0, 3.0, 5.0, 1.0]
                .iter()
                .enumerate()
                .map(|(i, &l)| (i, 1, l))
                .collect(),
        };
        // Averages 3.5, 3.0, 4.0, 3.0.
        assert_eq!(log.nonincreasing_windows(Stage::One, 2), (2, 3));
    }

    #[test]
    fn flip_is_an_involution() {
        let cfg = ModelConfig::micro();
        let s = &toy_data(&cfg, 1, 2)[0];
        let f = s.flip_horizontal();
        assert_ne!(&f, s);
        assert_eq!(&f.flip_horizontal(), s);
    }

    #[test]
    fn poly_schedule_endpoints() {
        assert_eq!(poly_lr(0.1, 0, 10, 0.9), 0.1);
        assert!((poly_lr(0.1, 5, 10, 1.0) - 0.05).abs() < 1e-15);
    }
}
