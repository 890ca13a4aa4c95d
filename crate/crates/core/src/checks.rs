//! Self-checks shared by the command line and the acceptance tests.
//!
//! Suites return named results instead of panicking so callers can print
//! one line per check and choose their own exit codes.

use serde::Serialize;

use crate::attention::{Affinity, FrameIndex, FrameMask, MaskRule, MultiheadAttention, ScoreScale};
use crate::autodiff::{
    grad_check, EmptyRows, GradCheckOptions, GradCheckReport, Graph, NodeId, ParamStore,
};
use crate::error::{Error, Result};
use crate::labelprop::{spectral_oracle, Combine, LabelPropConfig, LabelPropagator};
use crate::metrics::{
    boundary_f, evaluate, iou, j_statistics, largest_component_box, moca_success,
    per_category_mean, VideoEval, BOUNDARY_RADIUS, TAUS,
};
use crate::model::{segmentation_loss, LossConfig, MedVt, ModelConfig, LABELPROP_PREFIX, STRIDES};
use crate::rng::{mix, Rng};
use crate::synthclip::BoxYx;
use crate::tensor::{Padding, Tensor};

pub const GRAD_TOL: f64 = 1e-4;
pub const MODEL_GRAD_TOL: f64 = 1e-3;
pub const SPECTRAL_TOL: f64 = 1e-10;
pub const ROW_SUM_TOL: f64 = 1e-12;
pub const CASES_PER_OP: usize = 10;
/// Coordinates sampled per parameter tensor in the end-to-end check.
pub const MODEL_COORDS: usize = 16;
pub const MASK_INSTANCES: usize = 100;
pub const SPECTRAL_INSTANCES: usize = 50;
pub const SPECTRAL_MAX_TOKENS: usize = 48;
pub const DENSE_INSTANCES: usize = 30;
pub const DENSE_MAX_TOKENS: usize = 64;

/// Every differentiable tape operation the gradient suite exercises.
pub const GRAD_OPS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "relu",
    "ln",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "slice",
    "repeat_rows",
    "add_bias",
    "sum",
    "mean",
    "softmax_rows",
    "masked_softmax_rows",
    "conv2d",
    "conv3d",
    "resize",
    "group_norm",
    "layer_norm",
    "segmentation_loss",
    "attention",
    "affinity",
];

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub cases: usize,
    pub passed: bool,
    /// Worst error seen, in the check's own metric.
    pub max_err: f64,
    pub detail: String,
}

impl CheckResult {
    fn new(
        name: impl Into<String>,
        cases: usize,
        passed: bool,
        max_err: f64,
        detail: impl Into<String>,
    ) -> Self {
        CheckResult {
            name: name.into(),
            cases,
            passed,
            max_err,
            detail: detail.into(),
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{} {:<28} cases={:<4} max_err={:.3e} {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.cases,
            self.max_err,
            self.detail
        )
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub checks: Vec<CheckResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

// ---------------------------------------------------------------- gradients

type Build = Box<dyn Fn(&mut Graph, &ParamStore) -> Result<NodeId>>;

fn dim(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

fn pick<T: Copy>(rng: &mut Rng, xs: &[T]) -> T {
    xs[rng.below(xs.len())]
}

fn random_rule(rng: &mut Rng) -> MaskRule {
    pick(
        rng,
        &[MaskRule::Full, MaskRule::ManyToMany, MaskRule::ManyToOne],
    )
}

fn empty_policy(rule: MaskRule) -> EmptyRows {
    if rule == MaskRule::ManyToOne {
        EmptyRows::Zero
    } else {
        EmptyRows::Error
    }
}

/// Contracts `y` with a fixed random tensor so every output entry carries a
/// distinct weight in the scalar loss.
fn weighted_sum(g: &mut Graph, y: NodeId, seed: u64) -> Result<NodeId> {
    let shape = g.shape(y).to_vec();
    let w = g.input(Rng::new(seed).normal_tensor(&shape, 1.0));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn randn(rng: &mut Rng, dims: &[(usize, usize)], std: f64) -> Tensor {
    let shape: Vec<usize> = dims.iter().map(|&(lo, hi)| dim(rng, lo, hi)).collect();
    rng.normal_tensor(&shape, std)
}

fn randu(rng: &mut Rng, dims: &[(usize, usize)], lo: f64, hi: f64) -> Tensor {
    let shape: Vec<usize> = dims.iter().map(|&(a, b)| dim(rng, a, b)).collect();
    rng.uniform_tensor(&shape, lo, hi)
}

fn binary(store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
    let shape = [dim(rng, 1, 4), dim(rng, 1, 5)];
    store.insert("a", rng.normal_tensor(&shape, 1.0))?;
    store.insert("b", rng.normal_tensor(&shape, 1.0))
}

/// One random instance of `op`: the leaves it differentiates and the
/// closure that applies it.
fn op_case(op: &str, rng: &mut Rng) -> Result<(ParamStore, Build)> {
    let mut s = ParamStore::new();
    let build: Build = match op {
        "add" => {
            binary(&mut s, rng)?;
            Box::new(|g, st| {
                let (a, b) = (g.param(st, "a")?, g.param(st, "b")?);
                g.add(a, b)
            })
        }
        "sub" => {
            binary(&mut s, rng)?;
            Box::new(|g, st| {
                let (a, b) = (g.param(st, "a")?, g.param(st, "b")?);
                g.sub(a, b)
            })
        }
        "mul" => {
            binary(&mut s, rng)?;
            Box::new(|g, st| {
                let (a, b) = (g.param(st, "a")?, g.param(st, "b")?);
                g.mul(a, b)
            })
        }
        "scale" => {
            s.insert("a", randn(rng, &[(1, 4), (1, 5)], 1.0))?;
            let c = rng.range(-2.0, 2.0);
            Box::new(move |g, st| {
                let a = g.param(st, "a")?;
                Ok(g.scale(a, c))
            })
        }
        "add_scalar" => {
            s.insert("a", randn(rng, &[(1, 4), (1, 5)], 1.0))?;
            let c = rng.range(-2.0, 2.0);
            Box::new(move |g, st| {
                let a = g.param(st, "a")?;
                Ok(g.add_scalar(a, c))
            })
        }
        "relu" => {
            s.insert("a", randn(rng, &[(1, 4), (2, 6)], 1.0))?;
            Box::new(|g, st| {
                let a = g.param(st, "a")?;
                Ok(g.relu(a))
            })
        }
        "ln" => {
            s.insert("a", randu(rng, &[(1, 4), (1, 5)], 0.3, 3.0))?;
            Box::new(|g, st| {
                let a = g.param(st, "a")?;
                g.ln(a)
            })
        }
        "matmul" => {
            let (m, k, n) = (dim(rng, 1, 5), dim(rng, 1, 5), dim(rng, 1, 5));
            s.insert("a", rng.normal_tensor(&[m, k], 1.0))?;
            s.insert("b", rng.normal_tensor(&[k, n], 1.0))?;
            Box::new(|g, st| {
                let (a, b) = (g.param(st, "a")?, g.param(st, "b")?);
                g.matmul(a, b)
            })
        }
        "transpose" => {
            s.insert("a", randn(rng, &[(1, 5), (1, 5)], 1.0))?;
            Box::new(|g, st| {
                let a = g.param(st, "a")?;
                g.transpose(a)
            })
        }
        "reshape" => {
            let (x, y, z) = (dim(rng, 1, 3), dim(rng, 2, 3), dim(rng, 1, 4));
            s.insert("a", rng.normal_tensor(&[x, y, z], 1.0))?;
            Box::new(move |g, st| {
                let a = g.param(st, "a")?;
                g.reshape(a, &[x * y, z])
            })
        }
        "concat" => {
            let axis = rng.below(3);
            let parts = dim(rng, 2, 3);
            let base = [dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3)];
            for i in 0..parts {
                let mut shape = base;
                shape[axis] = dim(rng, 1, 3);
                s.insert(format!("p{i}"), rng.normal_tensor(&shape, 1.0))?;
            }
            Box::new(move |g, st| {
                let ids = (0..parts)
                    .map(|i| g.param(st, &format!("p{i}")))
                    .collect::<Result<Vec<_>>>()?;
                g.concat(&ids, axis)
            })
        }
        "slice" => {
            let shape = [dim(rng, 2, 4), dim(rng, 2, 4), dim(rng, 2, 4)];
            let axis = rng.below(3);
            let len = dim(rng, 1, shape[axis] - 1);
            let start = rng.below(shape[axis] - len + 1);
            s.insert("a", rng.normal_tensor(&shape, 1.0))?;
            Box::new(move |g, st| {
                let a = g.param(st, "a")?;
                g.slice(a, axis, start, len)
            })
        }
        "repeat_rows" => {
            let shape = [1, dim(rng, 1, 5)];
            s.insert("a", rng.normal_tensor(&shape, 1.0))?;
            let n = dim(rng, 2, 5);
            Box::new(move |g, st| {
                let a = g.param(st, "a")?;
                g.repeat_rows(a, n)
            })
        }
        "add_bias" => {
            let c = dim(rng, 1, 4);
            let shape = [dim(rng, 1, 3), dim(rng, 1, 3), c];
            s.insert("a", rng.normal_tensor(&shape, 1.0))?;
            s.insert("b", rng.normal_tensor(&[c], 1.0))?;
            Box::new(|g, st| {
                let (a, b) = (g.param(st, "a")?, g.param(st, "b")?);
                g.add_bias(a, b)
            })
        }
        "sum" => {
            s.insert("a", randn(rng, &[(1, 3), (1, 3), (1, 3)], 1.0))?;
            Box::new(|g, st| {
                let a = g.param(st, "a")?;
                Ok(g.sum(a))
            })
        }
        "mean" => {
            let axis = rng.below(3);
            s.insert("a", randn(rng, &[(1, 3), (1, 3), (1, 3)], 1.0))?;
            Box::new(move |g, st| {
                let a = g.param(st, "a")?;
                g.mean(a, axis)
            })
        }
        "softmax_rows" => {
            s.insert("a", randn(rng, &[(1, 4), (1, 6)], 1.5))?;
            Box::new(|g, st| {
                let a = g.param(st, "a")?;
                g.softmax_rows(a)
            })
        }
        "masked_softmax_rows" => {
            let index = FrameIndex::new(dim(rng, 2, 3), dim(rng, 1, 3))?;
            let mask = FrameMask::new(random_rule(rng), index);
            let n = index.len();
            s.insert("a", rng.normal_tensor(&[n, n], 1.5))?;
            Box::new(move |g, st| {
                let a = g.param(st, "a")?;
                g.masked_softmax_rows(a, &|i, j| mask.allows(i, j), EmptyRows::Zero)
            })
        }
        "conv2d" => {
            let k = dim(rng, 1, 3);
            let stride = dim(rng, 1, 2);
            let padding = pick(rng, &[Padding::Same, Padding::Valid]);
            let (cin, cout) = (dim(rng, 1, 3), dim(rng, 1, 3));
            let shape = [dim(rng, 1, 2), dim(rng, 3, 6), dim(rng, 3, 6), cin];
            s.insert("x", rng.normal_tensor(&shape, 1.0))?;
            s.insert("k", rng.normal_tensor(&[k, k, cin, cout], 0.5))?;
            Box::new(move |g, st| {
                let (x, k) = (g.param(st, "x")?, g.param(st, "k")?);
                g.conv2d(x, k, stride, padding)
            })
        }
        "conv3d" => {
            let (kt, k) = (dim(rng, 1, 3), dim(rng, 1, 3));
            let stride = dim(rng, 1, 2);
            let padding = pick(rng, &[Padding::Same, Padding::Valid]);
            let (cin, cout) = (dim(rng, 1, 2), dim(rng, 1, 3));
            let shape = [dim(rng, 3, 4), dim(rng, 3, 5), dim(rng, 3, 5), cin];
            s.insert("x", rng.normal_tensor(&shape, 1.0))?;
            s.insert("k", rng.normal_tensor(&[kt, k, k, cin, cout], 0.5))?;
            Box::new(move |g, st| {
                let (x, k) = (g.param(st, "x")?, g.param(st, "k")?);
                g.conv3d(x, k, stride, padding)
            })
        }
        "resize" => {
            let (h, w) = (dim(rng, 1, 8), dim(rng, 1, 8));
            s.insert("x", randn(rng, &[(1, 2), (2, 5), (2, 5), (1, 2)], 1.0))?;
            Box::new(move |g, st| {
                let x = g.param(st, "x")?;
                g.resize(x, h, w)
            })
        }
        "group_norm" => {
            let groups = dim(rng, 1, 3);
            let c = groups * dim(rng, 1, 2);
            let shape = [dim(rng, 1, 2), dim(rng, 2, 5), c];
            s.insert("x", rng.normal_tensor(&shape, 1.0))?;
            s.insert("gain", rng.normal_tensor(&[c], 1.0))?;
            s.insert("bias", rng.normal_tensor(&[c], 1.0))?;
            Box::new(move |g, st| {
                let (x, a, b) = (
                    g.param(st, "x")?,
                    g.param(st, "gain")?,
                    g.param(st, "bias")?,
                );
                g.group_norm(x, groups, 1e-5, a, b)
            })
        }
        "layer_norm" => {
            let c = dim(rng, 2, 6);
            let shape = [dim(rng, 1, 4), c];
            s.insert("x", rng.normal_tensor(&shape, 1.0))?;
            s.insert("gain", rng.normal_tensor(&[c], 1.0))?;
            s.insert("bias", rng.normal_tensor(&[c], 1.0))?;
            Box::new(|g, st| {
                let (x, a, b) = (
                    g.param(st, "x")?,
                    g.param(st, "gain")?,
                    g.param(st, "bias")?,
                );
                g.layer_norm(x, 1e-5, a, b)
            })
        }
        "segmentation_loss" => {
            let (n, c) = (dim(rng, 2, 12), dim(rng, 2, 3));
            s.insert("z", rng.normal_tensor(&[n, c], 1.5))?;
            let labels: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
            Box::new(move |g, st| {
                let z = g.param(st, "z")?;
                Ok(segmentation_loss(g, z, &labels, &LossConfig::default())?.0)
            })
        }
        "attention" => {
            let heads = dim(rng, 1, 2);
            let d_model = heads * dim(rng, 1, 3);
            let (dq, dk, dv, dout) = (
                dim(rng, 1, 4),
                dim(rng, 1, 4),
                dim(rng, 1, 4),
                dim(rng, 1, 3),
            );
            let masked = rng.below(2) == 0;
            let (nq, nk, mask) = if masked {
                let index = FrameIndex::new(dim(rng, 2, 3), dim(rng, 1, 2))?;
                (
                    index.len(),
                    index.len(),
                    Some(FrameMask::new(random_rule(rng), index)),
                )
            } else {
                (dim(rng, 1, 4), dim(rng, 1, 5), None)
            };
            let scale = pick(rng, &[ScoreScale::ModelDim, ScoreScale::HeadDim]);
            let mha = MultiheadAttention::new("att", [dq, dk, dv], d_model, dout, heads)?
                .with_scale(scale);
            mha.init(&mut s, rng)?;
            s.insert("q", rng.normal_tensor(&[nq, dq], 1.0))?;
            s.insert("k", rng.normal_tensor(&[nk, dk], 1.0))?;
            s.insert("v", rng.normal_tensor(&[nk, dv], 1.0))?;
            Box::new(move |g, st| {
                let (q, k, v) = (g.param(st, "q")?, g.param(st, "k")?, g.param(st, "v")?);
                let out = match &mask {
                    Some(m) => mha.forward_masked(g, st, q, k, v, m, EmptyRows::Zero)?,
                    None => mha.forward(g, st, q, k, v)?,
                };
                Ok(out.out)
            })
        }
        "affinity" => {
            let heads = dim(rng, 1, 2);
            let (dq, dk) = (dim(rng, 1, 4), dim(rng, 1, 4));
            let aff = Affinity::new("aff", dq, dk, heads * dim(rng, 1, 3), heads)?;
            aff.init(&mut s, rng)?;
            let shape = [dim(rng, 1, 3), dq];
            s.insert("q", rng.normal_tensor(&shape, 1.0))?;
            let shape = [dim(rng, 1, 6), dk];
            s.insert("k", rng.normal_tensor(&shape, 1.0))?;
            Box::new(move |g, st| {
                let (q, k) = (g.param(st, "q")?, g.param(st, "k")?);
                let maps = aff.forward(g, st, q, k)?;
                g.concat(&maps, 1)
            })
        }
        other => return Err(Error::Config(format!("no gradient case for op `{other}`"))),
    };
    Ok((s, build))
}

/// Gradient check of one op over `cases` random shapes and seeds.
pub fn check_op(op: &str, seed: u64, cases: usize) -> Result<CheckResult> {
    let op_id = GRAD_OPS
        .iter()
        .position(|&o| o == op)
        .unwrap_or(GRAD_OPS.len()) as u64;
    let mut worst: f64 = 0.0;
    let (mut checked, mut skipped, mut passed) = (0, 0, true);
    for case in 0..cases {
        let case_seed = mix(mix(seed, op_id), case as u64);
        let mut rng = Rng::new(case_seed);
        let (store, build) = op_case(op, &mut rng)?;
        let opts = GradCheckOptions {
            tol: GRAD_TOL,
            seed: case_seed,
            ..GradCheckOptions::default()
        };
        let report = grad_check(
            &store,
            |g, st| {
                let y = build(g, st)?;
                weighted_sum(g, y, mix(case_seed, 1))
            },
            &opts,
        )?;
        worst = worst.max(report.max_rel_err());
        checked += report.checked();
        skipped += report.skipped_kinks();
        passed &= report.passed();
    }
    Ok(CheckResult::new(
        op,
        cases,
        passed,
        worst,
        format!("coords={checked} kinks_skipped={skipped}"),
    ))
}

/// End-to-end gradient of the segmentation loss for the micro preset,
/// sampling `max_coords` coordinates per parameter. With `propagate` the
/// loss is on `Ŷ` (every parameter), otherwise on `Y′` as in stage 1.
pub fn model_gradient_check(
    seed: u64,
    max_coords: usize,
    propagate: bool,
) -> Result<GradCheckReport> {
    let cfg = ModelConfig::micro();
    let model = MedVt::new(cfg.clone())?;
    let mut store = model.init(seed)?;
    if !propagate {
        store.set_trainable_prefix(LABELPROP_PREFIX, false);
    }
    let [h, w] = cfg.input;
    let mut rng = Rng::new(mix(seed, 0x6d6f64));
    let clip = rng.uniform_tensor(&[cfg.frames, h, w, cfg.in_channels], 0.0, 1.0);
    let labels: Vec<usize> = (0..cfg.frames * h * w)
        .map(|_| rng.below(cfg.classes))
        .collect();
    let loss_cfg = LossConfig::default();
    let opts = GradCheckOptions {
        tol: MODEL_GRAD_TOL,
        max_coords: Some(max_coords),
        seed,
        ..GradCheckOptions::default()
    };
    grad_check(
        &store,
        |g, st| {
            let x = g.input(clip.clone());
            let out = model.forward(g, st, x, propagate)?;
            let up = g.resize(out.prediction(), h, w)?;
            Ok(segmentation_loss(g, up, &labels, &loss_cfg)?.0)
        },
        &opts,
    )
}

/// Every op in [`GRAD_OPS`] plus the micro model end to end.
pub fn gradient_suite(seed: u64) -> Result<SuiteReport> {
    let mut checks = GRAD_OPS
        .iter()
        .map(|op| check_op(op, seed, CASES_PER_OP))
        .collect::<Result<Vec<_>>>()?;
    for (name, propagate) in [("micro_model_stage1", false), ("micro_model_full", true)] {
        let report = model_gradient_check(seed, MODEL_COORDS, propagate)?;
        checks.push(CheckResult::new(
            name,
            1,
            report.passed(),
            report.max_rel_err(),
            format!(
                "params={} coords={} kinks_skipped={}",
                report.params.len(),
                report.checked(),
                report.skipped_kinks()
            ),
        ));
    }
    Ok(SuiteReport {
        suite: "gradients".into(),
        checks,
    })
}

// -------------------------------------------------------------- propagation

fn random_propagator(rng: &mut Rng, rule: MaskRule) -> Result<(LabelPropagator, ParamStore)> {
    let heads = dim(rng, 1, 2);
    let cfg = LabelPropConfig {
        d_feat: dim(rng, 2, 6),
        d_model: heads * dim(rng, 1, 3),
        heads,
        d_label: dim(rng, 1, 4),
        classes: dim(rng, 2, 3),
        rule,
        combine: Combine::Logits,
        score_scale: ScoreScale::ModelDim,
    };
    let lp = LabelPropagator::new("lp", cfg)?;
    let mut store = ParamStore::new();
    lp.init(&mut store, rng)?;
    Ok((lp, store))
}

struct Propagated {
    /// `Ȳ: [N, D]`.
    encoded: Tensor,
    /// `Ỹ: [N, D]`.
    propagated: Tensor,
    /// `D_L(Ỹ): [T,H,W,C]`.
    decoded: Tensor,
    weights: Vec<Tensor>,
}

fn propagate(
    lp: &LabelPropagator,
    store: &ParamStore,
    fd: &Tensor,
    y0: &Tensor,
) -> Result<Propagated> {
    let mut g = Graph::new();
    let (f, y) = (g.input(fd.clone()), g.input(y0.clone()));
    let out = lp.forward(&mut g, store, f, y)?;
    Ok(Propagated {
        encoded: g.value(out.encoded).clone(),
        propagated: g.value(out.propagated).clone(),
        decoded: g.value(out.decoded).clone(),
        weights: out.weights.iter().map(|&w| g.value(w).clone()).collect(),
    })
}

/// Output rows belonging to frame `t`, from both `Ỹ` and `D_L(Ỹ)`.
fn frame_outputs(p: &Propagated, t: usize, per_frame: usize) -> Result<(Tensor, Tensor)> {
    Ok((
        p.propagated.slice(0, t * per_frame, per_frame)?,
        p.decoded.slice(0, t, 1)?,
    ))
}

/// Overwrites frames `frames` of `y` with fresh values.
fn perturb_frames(y: &Tensor, frames: std::ops::Range<usize>, rng: &mut Rng) -> Tensor {
    let per = y.len() / y.dim(0);
    let mut out = y.clone();
    for v in &mut out.data_mut()[frames.start * per..frames.end * per] {
        *v += rng.normal(3.0);
    }
    out
}

/// Frame-`t` outputs are bit-identical when the labels they must not read
/// change (frame `t` for MtoM, frames `t..T` for Mto1), and do change when a
/// frame they may read changes (skipped when the label encoder maps both
/// versions of that frame to the same embedding).
pub fn mask_semantics(seed: u64, instances: usize) -> Result<CheckResult> {
    let (mut invariant, mut sensitive, mut sensitivity_cases) = (0, 0, 0);
    let mut failures = Vec::new();
    for i in 0..instances {
        let mut rng = Rng::new(mix(mix(seed, 0x6d61736b), i as u64));
        let frames = 2 + i % 3;
        let rule = if i % 2 == 0 {
            MaskRule::ManyToMany
        } else {
            MaskRule::ManyToOne
        };
        let (lp, store) = random_propagator(&mut rng, rule)?;
        let (h, w) = (dim(&mut rng, 1, 3), dim(&mut rng, 1, 3));
        let fd = rng.normal_tensor(&[frames, h, w, lp.cfg.d_feat], 1.0);
        let y0 = rng.normal_tensor(&[frames, h, w, lp.cfg.classes], 2.0);
        let t = rng.below(frames);
        let base = propagate(&lp, &store, &fd, &y0)?;
        let (bp, bd) = frame_outputs(&base, t, h * w)?;

        let hidden = match rule {
            MaskRule::ManyToOne => t..frames,
            _ => t..t + 1,
        };
        let moved = propagate(&lp, &store, &fd, &perturb_frames(&y0, hidden, &mut rng))?;
        let (mp, md) = frame_outputs(&moved, t, h * w)?;
        if mp.bit_eq(&bp) && md.bit_eq(&bd) {
            invariant += 1;
        } else {
            failures.push(format!(
                "instance {i} ({}, T={frames}, t={t}) leaked",
                rule.label()
            ));
        }

        let visible = match rule {
            MaskRule::ManyToOne if t > 0 => Some(rng.below(t)),
            MaskRule::ManyToOne => None,
            _ => Some((t + 1 + rng.below(frames - 1)) % frames),
        };
        if let Some(u) = visible {
            let moved = propagate(&lp, &store, &fd, &perturb_frames(&y0, u..u + 1, &mut rng))?;
            let rows = |p: &Propagated| p.encoded.slice(0, u * h * w, h * w);
            if rows(&moved)?.bit_eq(&rows(&base)?) {
                continue;
            }
            sensitivity_cases += 1;
            let (mp, _) = frame_outputs(&moved, t, h * w)?;
            if mp.max_abs_diff(&bp) > 0.0 {
                sensitive += 1;
            } else {
                failures.push(format!(
                    "instance {i} ({}, t={t}) ignored frame {u}",
                    rule.label()
                ));
            }
        }
    }
    let passed = failures.is_empty();
    let mut detail =
        format!("invariant={invariant}/{instances} sensitive={sensitive}/{sensitivity_cases}");
    if let Some(f) = failures.first() {
        detail.push_str(&format!(" first failure: {f}"));
    }
    Ok(CheckResult::new(
        "mask_semantics",
        instances,
        passed,
        0.0,
        detail,
    ))
}

/// Propagation weights against the random-walk operator `D^{-1} W` built
/// from the same scores, on instances of up to `max_tokens` tokens.
pub fn spectral_agreement(seed: u64, instances: usize, max_tokens: usize) -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    let mut largest = 0;
    for i in 0..instances {
        let mut rng = Rng::new(mix(mix(seed, 0x73706563), i as u64));
        let frames = 2 + i % 3;
        let rule = [MaskRule::Full, MaskRule::ManyToMany, MaskRule::ManyToOne][(i / 3) % 3];
        let (lp, store) = random_propagator(&mut rng, rule)?;
        let h = dim(&mut rng, 1, 4);
        let w = dim(&mut rng, 1, 4).min((max_tokens / (frames * h)).max(1));
        let n = frames * h * w;
        largest = largest.max(n);
        let fd = rng.normal_tensor(&[frames, h, w, lp.cfg.d_feat], 1.0);
        let y0 = rng.normal_tensor(&[frames, h, w, lp.cfg.classes], 1.0);
        let out = propagate(&lp, &store, &fd, &y0)?;
        let scores = lp.head_scores(&store, &fd.reshape(&[n, lp.cfg.d_feat])?)?;
        let mask = lp.mask(frames, h * w)?;
        for (s, a) in scores.iter().zip(&out.weights) {
            worst = worst.max(spectral_oracle(s, &mask, a)?.max_abs_err);
        }
    }
    Ok(CheckResult::new(
        "spectral_oracle",
        instances,
        worst <= SPECTRAL_TOL,
        worst,
        format!("tol={SPECTRAL_TOL:e} largest={largest} tokens"),
    ))
}

/// Row-major `0 / -inf` additive mask.
pub fn dense_mask(mask: &FrameMask, n: usize) -> Tensor {
    let data = (0..n * n)
        .map(|k| {
            if mask.allows(k / n, k % n) {
                0.0
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    Tensor::from_vec(&[n, n], data).expect("square mask")
}

/// The rule-evaluated masked softmax, and its product with values, against
/// a materialized `-inf` mask added to the scores: bit-identical on every
/// row that has a permitted key; rows without one are exactly zero.
pub fn dense_equivalence(seed: u64, instances: usize, max_tokens: usize) -> Result<CheckResult> {
    let mut failures = Vec::new();
    let mut largest = 0;
    for i in 0..instances {
        let mut rng = Rng::new(mix(mix(seed, 0x64656e73), i as u64));
        let frames = 2 + i % 3;
        let rule = [MaskRule::Full, MaskRule::ManyToMany, MaskRule::ManyToOne][(i / 3) % 3];
        let per_frame = if i + 3 >= instances {
            max_tokens / frames
        } else {
            dim(&mut rng, 1, max_tokens / frames)
        };
        let index = FrameIndex::new(frames, per_frame)?;
        let mask = FrameMask::new(rule, index);
        let n = index.len();
        largest = largest.max(n);
        let scores = rng.normal_tensor(&[n, n], 2.0);
        let dv = dim(&mut rng, 1, 6);
        let values = rng.normal_tensor(&[n, dv], 1.0);

        let mut g = Graph::new();
        let s = g.input(scores.clone());
        let v = g.input(values.clone());
        let a = g.masked_softmax_rows(s, &|i, j| mask.allows(i, j), empty_policy(rule))?;
        let o = g.matmul(a, v)?;

        let biased = scores.add(&dense_mask(&mask, n))?;
        let skip = if rule == MaskRule::ManyToOne {
            per_frame
        } else {
            0
        };
        let live = biased.slice(0, skip, n - skip)?.softmax(1)?;
        let dense = if skip > 0 {
            Tensor::concat(&[&Tensor::zeros(&[skip, n]), &live], 0)?
        } else {
            live
        };
        let dense_out = dense.matmul(&values)?;
        if !g.value(a).bit_eq(&dense) || !g.value(o).bit_eq(&dense_out) {
            failures.push(format!("instance {i} ({}, {n} tokens)", rule.label()));
        }
    }
    let detail = match failures.first() {
        Some(f) => format!("{} mismatches, first {f}", failures.len()),
        None => format!("bit-identical, largest={largest} tokens"),
    };
    Ok(CheckResult::new(
        "dense_mask_equivalence",
        instances,
        failures.is_empty(),
        0.0,
        detail,
    ))
}

pub fn propagation_suite(seed: u64) -> Result<SuiteReport> {
    Ok(SuiteReport {
        suite: "propagation".into(),
        checks: vec![
            mask_semantics(seed, MASK_INSTANCES)?,
            spectral_agreement(seed, SPECTRAL_INSTANCES, SPECTRAL_MAX_TOKENS)?,
            dense_equivalence(seed, DENSE_INSTANCES, DENSE_MAX_TOKENS)?,
        ],
    })
}

// --------------------------------------------------------------- invariants

/// Largest `|row sum - 1|` over rows with a permitted key, and whether every
/// other row is exactly zero.
fn row_sum_error(w: &Tensor, permitted: impl Fn(usize) -> bool) -> (f64, bool) {
    let m = w.dim(1);
    let mut worst: f64 = 0.0;
    let mut zero_ok = true;
    for (i, row) in w.data().chunks(m).enumerate() {
        if permitted(i) {
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        } else {
            zero_ok &= row.iter().all(|&x| x == 0.0);
        }
    }
    (worst, zero_ok)
}

fn random_clip(cfg: &ModelConfig, rng: &mut Rng) -> Tensor {
    let [h, w] = cfg.input;
    rng.uniform_tensor(&[cfg.frames, h, w, cfg.in_channels], 0.0, 1.0)
}

/// Row-stochastic attention, `F^A` inside `[0, 1]`, and the combine step
/// returning `Y′` when the decoded labels equal `Y′`.
pub fn invariant_suite(seed: u64) -> Result<SuiteReport> {
    let mut checks = Vec::new();

    // Stand-alone attention under each rule.
    let mut worst: f64 = 0.0;
    let mut zero_ok = true;
    let mut negatives = false;
    for i in 0..30 {
        let mut rng = Rng::new(mix(mix(seed, 0x726f7773), i));
        let rule = random_rule(&mut rng);
        let index = FrameIndex::new(dim(&mut rng, 2, 4), dim(&mut rng, 1, 8))?;
        let mask = FrameMask::new(rule, index);
        let d = 8;
        let mha = MultiheadAttention::square("a", d, 2)?;
        let mut store = ParamStore::new();
        mha.init(&mut store, &mut rng)?;
        let mut g = Graph::new();
        let x = g.input(rng.normal_tensor(&[index.len(), d], 2.0));
        let out = mha.forward_masked(&mut g, &store, x, x, x, &mask, EmptyRows::Zero)?;
        for &w in &out.weights {
            let w = g.value(w);
            let (e, z) = row_sum_error(w, |i| rule != MaskRule::ManyToOne || index.tau(i) > 0);
            worst = worst.max(e);
            zero_ok &= z;
            negatives |= w.data().iter().any(|&x| x < 0.0);
        }
    }

    // Decoder affinities and propagation weights of a freshly initialised model.
    let cfg = ModelConfig::desk();
    let model = MedVt::new(cfg.clone())?;
    let store = model.init(seed)?;
    let mut g = Graph::new();
    let x = g.input(random_clip(&cfg, &mut Rng::new(mix(seed, 0x636c6970))));
    let out = model.forward(&mut g, &store, x, true)?;
    let lp_out = out
        .labelprop
        .as_ref()
        .ok_or_else(|| Error::Config("desk model has no label propagation".into()))?;
    for &w in out.decoder.affinity.iter().chain(&lp_out.weights) {
        let w = g.value(w);
        let (e, z) = row_sum_error(w, |_| true);
        worst = worst.max(e);
        zero_ok &= z;
        negatives |= w.data().iter().any(|&x| x < 0.0);
    }
    checks.push(CheckResult::new(
        "attention_row_stochastic",
        30 + out.decoder.affinity.len() + lp_out.weights.len(),
        worst <= ROW_SUM_TOL && zero_ok && !negatives,
        worst,
        format!("tol={ROW_SUM_TOL:e} empty_rows_zero={zero_ok} negative_entries={negatives}"),
    ));

    let fa = g.value(out.decoder.attention_map);
    let (lo, hi) = fa
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| {
            (l.min(v), h.max(v))
        });
    checks.push(CheckResult::new(
        "object_attention_unit_range",
        1,
        lo >= 0.0 && hi <= 1.0,
        0.0,
        format!("range [{lo:.3e}, {hi:.3e}] over {:?}", fa.shape()),
    ));

    let lp = model
        .labelprop()
        .ok_or_else(|| Error::Config("desk model has no label propagation".into()))?;
    let y = g.value(out.initial).clone();
    let mut g2 = Graph::new();
    let (a, b) = (g2.input(y.clone()), g2.input(y.clone()));
    let c = lp.combine(&mut g2, a, b)?;
    let combined = g2.value(c);
    checks.push(CheckResult::new(
        "combine_fixed_point",
        1,
        combined.bit_eq(&y),
        combined.max_abs_diff(&y),
        format!("combine={:?}", lp.cfg.combine),
    ));
    Ok(SuiteReport {
        suite: "invariants".into(),
        checks,
    })
}

// ------------------------------------------------------------------- shapes

/// Shapes produced by one forward pass.
#[derive(Debug, Clone, Serialize)]
pub struct ShapeTrace {
    pub input: Vec<usize>,
    pub d: usize,
    pub heads: usize,
    pub frames: usize,
    pub n_queries: usize,
    pub backbone: Vec<Vec<usize>>,
    pub encoded: Vec<Vec<usize>>,
    pub pixel: Vec<Vec<usize>>,
    pub decoder_blocks: usize,
    /// `(iteration, scale)` of every decoder block in execution order.
    pub decoder_trace: Vec<(usize, usize)>,
    pub queries: Vec<usize>,
    pub attention_map: Vec<usize>,
    pub features: Vec<usize>,
    pub initial: Vec<usize>,
    pub prediction: Vec<usize>,
}

/// Runs one forward pass of `cfg` on a random clip and records every shape.
pub fn shape_trace(cfg: &ModelConfig, seed: u64) -> Result<ShapeTrace> {
    let model = MedVt::new(cfg.clone())?;
    let store = model.init(seed)?;
    let clip = random_clip(cfg, &mut Rng::new(mix(seed, 0x7368)));
    let mut g = Graph::new();
    let x = g.input(clip.clone());
    let out = model.forward(&mut g, &store, x, true)?;
    let shape = |g: &Graph, n: NodeId| g.shape(n).to_vec();
    let [h, w] = cfg.input;
    Ok(ShapeTrace {
        input: clip.shape().to_vec(),
        d: cfg.d,
        heads: cfg.heads,
        frames: cfg.frames,
        n_queries: cfg.n_queries,
        backbone: STRIDES
            .iter()
            .zip(cfg.widths)
            .map(|(s, c)| vec![cfg.frames, h / s, w / s, c])
            .collect(),
        encoded: out.encoded.iter().map(|&n| shape(&g, n)).collect(),
        pixel: out.pixel.iter().map(|&n| shape(&g, n)).collect(),
        decoder_blocks: model.decoder().block_count(),
        decoder_trace: out.decoder.trace.clone(),
        queries: shape(&g, out.decoder.queries),
        attention_map: shape(&g, out.decoder.attention_map),
        features: shape(&g, out.decoder.features),
        initial: shape(&g, out.initial),
        prediction: shape(&g, out.prediction()),
    })
}

/// Input used for the full-size trace; a 384×640 input
/// needs a ~70 GB propagation affinity at stride 4.
pub const PAPER_TRACE_INPUT: [usize; 2] = [64, 64];

/// Full-size dimensions with a reduced spatial input.
pub fn paper_trace_config() -> ModelConfig {
    ModelConfig {
        input: PAPER_TRACE_INPUT,
        ..ModelConfig::paper()
    }
}

fn trace_checks(name: &str, cfg: &ModelConfig, t: &ShapeTrace) -> Vec<CheckResult> {
    let mut checks = Vec::new();
    let token_ok = t
        .encoded
        .iter()
        .zip(&t.backbone)
        .all(|(e, b)| e == &vec![b[0] * b[1] * b[2], cfg.d]);
    checks.push(CheckResult::new(
        format!("{name}_encoder_tokens"),
        t.encoded.len(),
        token_ok && t.encoded.len() == 4,
        0.0,
        format!("{:?}", t.encoded),
    ));
    let expected: Vec<(usize, usize)> = (0..cfg.iterations)
        .flat_map(|i| cfg.decoder_scales.iter().map(move |&s| (i, s)))
        .collect();
    checks.push(CheckResult::new(
        format!("{name}_decoder_blocks"),
        t.decoder_blocks,
        t.decoder_blocks == cfg.iterations * cfg.decoder_scales.len()
            && t.decoder_trace == expected,
        0.0,
        format!("{} blocks, order {:?}", t.decoder_blocks, t.decoder_trace),
    ));
    let [h, w] = cfg.input;
    let fine = [cfg.frames, h / STRIDES[0], w / STRIDES[0]];
    checks.push(CheckResult::new(
        format!("{name}_decoder_features"),
        1,
        t.features[..3] == fine
            && t.features[3] == cfg.d + cfg.heads
            && t.attention_map[3] == cfg.heads,
        0.0,
        format!("F^A {:?}, F^D {:?}", t.attention_map, t.features),
    ));
    checks.push(CheckResult::new(
        format!("{name}_prediction"),
        1,
        t.initial == [fine[0], fine[1], fine[2], cfg.classes] && t.prediction == t.initial,
        0.0,
        format!("{:?}", t.prediction),
    ));
    checks
}

/// Shape contracts of the desk model and of the full-size dimensions.
pub fn structure_suite(seed: u64) -> Result<SuiteReport> {
    let desk = ModelConfig::desk();
    let paper = paper_trace_config();
    let mut checks = trace_checks("desk", &desk, &shape_trace(&desk, seed)?);
    checks.extend(trace_checks(
        "paper_dims",
        &paper,
        &shape_trace(&paper, seed)?,
    ));
    Ok(SuiteReport {
        suite: "structure".into(),
        checks,
    })
}

// ------------------------------------------------------------------ metrics

pub const SUCCESS_PAIRS: usize = 1000;

fn rect_mask(h: usize, w: usize, b: BoxYx) -> Vec<u8> {
    let mut m = vec![0; h * w];
    for y in b[0]..b[2] {
        for x in b[1]..b[3] {
            m[y * w + x] = 1;
        }
    }
    m
}

/// Hand-computed metric values, each compared exactly.
fn metric_goldens() -> Result<Vec<(&'static str, bool)>> {
    let a = rect_mask(4, 4, [0, 0, 4, 2]);
    let sq = rect_mask(12, 12, [3, 3, 9, 9]);
    let gt = [0, 0, 10, 8];
    let j = j_statistics(&[0.9, 0.8, 0.7, 0.6])?;
    let flat = j_statistics(&[0.6; 7])?;
    let off = moca_success(&rect_mask(12, 12, [0, 2, 10, 10]), 12, 12, &gt)?;
    let empty = moca_success(&[0; 144], 12, 12, &gt)?;
    let cats = per_category_mean([("a", 1.0), ("b", 0.0), ("b", 0.0)])?;
    let mut two = rect_mask(10, 10, [0, 0, 2, 2]);
    for (i, v) in rect_mask(10, 10, [5, 5, 9, 8]).into_iter().enumerate() {
        two[i] |= v;
    }
    let boxes: Vec<BoxYx> = (0..4).map(|t| [1, t, 5, t + 3]).collect();
    let masks: Vec<u8> = boxes.iter().flat_map(|&b| rect_mask(8, 8, b)).collect();
    let perfect = evaluate(
        &[VideoEval {
            category: "disk",
            height: 8,
            width: 8,
            pred: &masks,
            gt: &masks,
            boxes: &boxes,
        }],
        BOUNDARY_RADIUS,
    )?;
    Ok(vec![
        ("iou_identical", iou(&a, &a)? == 1.0),
        (
            "iou_disjoint",
            iou(&a, &rect_mask(4, 4, [0, 2, 4, 4]))? == 0.0,
        ),
        (
            "iou_third",
            iou(&a, &rect_mask(4, 4, [0, 1, 4, 3]))? == 1.0 / 3.0,
        ),
        ("iou_both_empty", iou(&[0; 4], &[0; 4])? == 1.0),
        ("j_mean", j.mean == (0.9 + 0.8 + 0.7 + 0.6) / 4.0),
        ("j_recall", j.recall == 1.0),
        ("j_decay", j.decay == 0.9 - 0.6),
        ("j_constant", (flat.recall, flat.decay) == (1.0, 0.0)),
        ("f_identical", boundary_f(&sq, &sq, 12, 12, 1.0)? == 1.0),
        (
            "f_shift_within_radius",
            boundary_f(&sq, &rect_mask(12, 12, [3, 4, 9, 10]), 12, 12, 1.0)? == 1.0,
        ),
        (
            "success_exact",
            moca_success(&rect_mask(12, 12, gt), 12, 12, &gt)?.hits == [true; 5],
        ),
        (
            "success_empty",
            (empty.iou, empty.hits) == (0.0, [false; 5]),
        ),
        (
            "success_sixty",
            off.iou == 0.6 && off.hits == [true, false, false, false, false],
        ),
        (
            "largest_component",
            largest_component_box(&two, 10, 10) == Some([5, 5, 9, 8]),
        ),
        ("category_means", cats.overall == 0.5),
        (
            "perfect_video",
            (
                perfect.j_mean,
                perfect.f_mean,
                perfect.sr_mean,
                perfect.j_decay,
            ) == (1.0, 1.0, 1.0, 0.0),
        ),
    ])
}

/// Success must never hold at a threshold while failing at a lower one.
pub fn success_monotonicity(seed: u64, pairs: usize) -> Result<CheckResult> {
    let mut rng = Rng::new(mix(seed, 0x7372));
    let mut violations = 0;
    for _ in 0..pairs {
        let (h, w) = (dim(&mut rng, 4, 16), dim(&mut rng, 4, 16));
        let density = rng.range(0.05, 0.9);
        let pred: Vec<u8> = (0..h * w)
            .map(|_| u8::from(rng.uniform() < density))
            .collect();
        let (y0, x0) = (rng.below(h), rng.below(w));
        let gt = [
            y0,
            x0,
            y0 + 1 + rng.below(h - y0),
            x0 + 1 + rng.below(w - x0),
        ];
        let hits = moca_success(&pred, h, w, &gt)?.hits;
        violations += hits.windows(2).filter(|p| p[1] && !p[0]).count();
    }
    Ok(CheckResult::new(
        "success_rate_monotone",
        pairs,
        violations == 0,
        violations as f64,
        format!("{violations} violations over {} thresholds", TAUS.len()),
    ))
}

pub fn metrics_suite(seed: u64) -> Result<SuiteReport> {
    let goldens = metric_goldens()?;
    let failed: Vec<&str> = goldens
        .iter()
        .filter(|(_, ok)| !ok)
        .map(|(n, _)| *n)
        .collect();
    let detail = if failed.is_empty() {
        "all exact".to_string()
    } else {
        format!("mismatched: {}", failed.join(", "))
    };
    Ok(SuiteReport {
        suite: "metrics".into(),
        checks: vec![
            CheckResult::new(
                "hand_computed_values",
                goldens.len(),
                failed.is_empty(),
                failed.len() as f64,
                detail,
            ),
            success_monotonicity(seed, SUCCESS_PAIRS)?,
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_has_a_case() {
        let mut rng = Rng::new(1);
        for op in GRAD_OPS {
            let _ = op_case(op, &mut rng).unwrap();
        }
        assert!(op_case("nope", &mut rng).is_err());
    }

    #[test]
    fn op_checks_pass_on_a_few_cases() {
        for op in ["matmul", "conv3d", "masked_softmax_rows", "attention"] {
            let r = check_op(op, 3, 3).unwrap();
            assert!(r.passed, "{}", r.line());
        }
    }

    #[test]
    fn metrics_suite_passes() {
        let r = metrics_suite(2).unwrap();
        assert!(
            r.passed(),
            "{:?}",
            r.failures().map(CheckResult::line).collect::<Vec<_>>()
        );
    }

    #[test]
    fn dense_mask_marks_forbidden_pairs() {
        let mask = FrameMask::new(MaskRule::ManyToOne, FrameIndex::new(2, 1).unwrap());
        let m = dense_mask(&mask, 2);
        assert_eq!(
            m.data(),
            &[f64::NEG_INFINITY, f64::NEG_INFINITY, 0.0, f64::NEG_INFINITY]
        );
    }

    #[test]
    fn small_propagation_suite_passes() {
        assert!(mask_semantics(5, 12).unwrap().passed);
        assert!(spectral_agreement(5, 9, 24).unwrap().passed);
        assert!(dense_equivalence(5, 6, 24).unwrap().passed);
    }

    #[test]
    fn leaking_mask_is_caught() {
        // Full attention lets frame t read its own labels.
        let mut rng = Rng::new(2);
        let (lp, store) = random_propagator(&mut rng, MaskRule::Full).unwrap();
        let fd = rng.normal_tensor(&[2, 2, 2, lp.cfg.d_feat], 1.0);
        let y0 = rng.normal_tensor(&[2, 2, 2, lp.cfg.classes], 1.0);
        let base = propagate(&lp, &store, &fd, &y0).unwrap();
        let moved = propagate(&lp, &store, &fd, &perturb_frames(&y0, 0..1, &mut rng)).unwrap();
        let (a, _) = frame_outputs(&base, 0, 4).unwrap();
        let (b, _) = frame_outputs(&moved, 0, 4).unwrap();
        assert!(!a.bit_eq(&b));
    }

    #[test]
    fn micro_trace_shapes() {
        let cfg = ModelConfig::micro();
        let t = shape_trace(&cfg, 1).unwrap();
        let checks = trace_checks("micro", &cfg, &t);
        assert!(checks.iter().all(|c| c.passed), "{:?}", checks);
        assert_eq!(t.features, vec![2, 8, 8, 10]);
    }
}
