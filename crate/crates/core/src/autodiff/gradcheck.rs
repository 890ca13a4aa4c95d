//! Analytic gradients against central finite differences.
//!
//! Relative error per coordinate is `|a - n| / max(|a|, |n|, floor)`. A
//! coordinate whose `+h` and `-h` evaluations take different ReLU pieces
//! straddles a kink, where the derivative does not exist; such coordinates are
//! counted as skipped rather than compared.

use serde::Serialize;

use crate::autodiff::graph::{Graph, NodeId};
use crate::autodiff::params::ParamStore;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// Check at most this many coordinates per parameter (all when `None`).
    pub max_coords: Option<usize>,
    /// Seed for the coordinate sample.
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tol: 1e-4,
            floor: 1e-4,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub skipped_kinks: usize,
    pub max_rel_err: f64,
    pub worst_index: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub loss: f64,
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }

    pub fn skipped_kinks(&self) -> usize {
        self.params.iter().map(|p| p.skipped_kinks).sum()
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tol && self.checked() > 0
    }
}

pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn evaluate<F>(f: &F, store: &ParamStore, radius: f64) -> Result<(f64, u64)>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    let mut g = Graph::new();
    g.track_kinks(radius);
    let loss = f(&mut g, store)?;
    let v = g.value(loss);
    if v.len() != 1 {
        return Err(Error::invalid(
            "grad_check",
            format!("loss must be scalar, got {:?}", v.shape()),
        ));
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("grad_check loss = {v}")));
    }
    Ok((v, g.relu_signature()))
}

/// Checks the gradient of `f` with respect to every trainable parameter in
/// `store`. `f` builds the scalar loss on a fresh graph.
pub fn grad_check<F>(store: &ParamStore, f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    let radius = 10.0 * opts.step;
    let mut g = Graph::new();
    let loss_id = f(&mut g, store)?;
    let loss = g.value(loss_id).item();
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("grad_check loss = {loss}")));
    }
    let grads = g.backward(loss_id)?;
    drop(g);

    let mut rng = Rng::new(opts.seed);
    let mut work = store.clone();
    let mut params = Vec::new();
    for name in store.trainable_names() {
        let Some(analytic) = grads.get(name) else {
            continue;
        };
        let base = store.value(name)?.clone();
        let n = base.len();
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < n => {
                let mut all: Vec<usize> = (0..n).collect();
                for i in 0..k {
                    let j = i + rng.below(n - i);
                    all.swap(i, j);
                }
                all.truncate(k);
                all
            }
            _ => (0..n).collect(),
        };
        let mut check = ParamCheck {
            name: name.to_owned(),
            checked: 0,
            skipped_kinks: 0,
            max_rel_err: 0.0,
            worst_index: None,
        };
        for &i in &coords {
            let mut plus = base.clone();
            plus.data_mut()[i] += opts.step;
            work.set(name, plus)?;
            let (lp, sp) = evaluate(&f, &work, radius)?;
            let mut minus = base.clone();
            minus.data_mut()[i] -= opts.step;
            work.set(name, minus)?;
            let (lm, sm) = evaluate(&f, &work, radius)?;
            if sp != sm {
                check.skipped_kinks += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * opts.step);
            let e = rel_err(analytic.data()[i], numeric, opts.floor);
            check.checked += 1;
            if e > check.max_rel_err || check.worst_index.is_none() {
                check.max_rel_err = check.max_rel_err.max(e);
                check.worst_index = Some(i);
            }
        }
        work.set(name, base)?;
        params.push(check);
    }
    Ok(GradCheckReport {
        loss,
        tol: opts.tol,
        params,
    })
}
