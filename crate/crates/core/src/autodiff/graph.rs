//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation eagerly: each call computes the forward
//! value and appends a node that remembers its inputs and whatever the vector
//! Jacobian product needs. Nodes are appended in execution order, so the tape
//! is already topologically sorted and [`Graph::backward`] is one reverse sweep.

use std::collections::BTreeMap;

use crate::autodiff::params::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::conv::{conv2d_geometry, conv3d_geometry, conv_apply};
use crate::tensor::norm::group_norm_with_stats;
use crate::tensor::resize::resize_bilinear_adjoint;
use crate::tensor::{resize_bilinear, ConvGeometry, GroupNormStats, Padding, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Relu(NodeId),
    Ln(NodeId),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    Concat {
        inputs: Vec<NodeId>,
        axis: usize,
    },
    Slice {
        input: NodeId,
        axis: usize,
        start: usize,
    },
    RepeatRows(NodeId),
    Sum(NodeId),
    Mean {
        input: NodeId,
        axis: usize,
    },
    SoftmaxRows(NodeId),
    Conv {
        x: NodeId,
        k: NodeId,
        geom: Box<ConvGeometry>,
        cols: Tensor,
    },
    Resize(NodeId),
    GroupNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        stats: Box<GroupNormStats>,
    },
    /// Fused loss; `dlogits` is the gradient of the scalar w.r.t. the logits.
    Loss {
        logits: NodeId,
        dlogits: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    name: Option<String>,
}

/// What to do with a softmax row whose entries are all masked.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmptyRows {
    Error,
    /// Emit an all-zero row (used where a caller bypasses such rows).
    Zero,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, NodeId>,
    kink_radius: Option<f64>,
    near_kinks: usize,
    relu_signature: u64,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
    by_name: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }

    pub fn node(&self, id: NodeId) -> Option<&Tensor> {
        self.by_node.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.by_name.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.by_name.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }

    /// Drops per-node gradients, keeping only the named parameters.
    pub fn into_named(mut self) -> Self {
        self.by_node = Vec::new();
        self
    }

    /// Accumulates another set of named gradients into this one.
    pub fn accumulate(&mut self, other: &Gradients) -> Result<()> {
        for (name, g) in &other.by_name {
            match self.by_name.get_mut(name) {
                Some(acc) => *acc = acc.add(g)?,
                None => {
                    self.by_name.insert(name.clone(), g.clone());
                }
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.by_name.values_mut() {
            *g = g.scale(c);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.by_name.values().all(Tensor::all_finite)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Counts ReLU inputs closer than `radius` to the kink at zero and
    /// fingerprints the on/off pattern of every ReLU.
    pub fn track_kinks(&mut self, radius: f64) {
        self.kink_radius = Some(radius);
    }

    pub fn near_kinks(&self) -> usize {
        self.near_kinks
    }

    /// Hash of the ReLU activation pattern seen so far (tracking only).
    /// Two evaluations with equal signatures took the same linear piece.
    pub fn relu_signature(&self) -> u64 {
        self.relu_signature
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            name: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Named leaf outside any [`ParamStore`].
    pub fn variable(&mut self, name: &str, value: Tensor, trainable: bool) -> NodeId {
        let id = self.push(value, Op::Leaf, trainable);
        self.nodes[id.0].name = Some(name.to_owned());
        self.params.insert(name.to_owned(), id);
        id
    }

    /// Leaf for a stored parameter; repeated lookups of one name share a node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.params.get(name) {
            return Ok(id);
        }
        let p = store
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_owned()))?;
        Ok(self.variable(name, p.value.clone(), p.trainable))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).mul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).scale(c);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).add_scalar(c);
        let rg = self.rg(&[a]);
        self.push(v, Op::AddScalar(a), rg)
    }

    /// ReLU with subgradient 0 at 0.
    pub fn relu(&mut self, a: NodeId) -> NodeId {
        if let Some(r) = self.kink_radius {
            let (mut h, mut near) = (self.relu_signature, 0);
            for &v in self.nodes[a.0].value.data() {
                if v.abs() < r {
                    near += 1;
                }
                h = crate::rng::mix(h, (v > 0.0) as u64);
            }
            self.relu_signature = h;
            self.near_kinks += near;
        }
        let v = self.value(a).relu();
        let rg = self.rg(&[a]);
        self.push(v, Op::Relu(a), rg)
    }

    /// Natural logarithm; inputs must be positive.
    pub fn ln(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        if x.data().iter().any(|&v| v <= 0.0) {
            return Err(Error::invalid("ln", "non-positive input"));
        }
        let v = x.map(f64::ln);
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::Ln(a), rg))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Matmul(a, b), rg))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).transpose()?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        if self.shape(a) == shape {
            return Ok(a);
        }
        let v = self.value(a).reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::Reshape(a), rg))
    }

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        if inputs.len() == 1 {
            return Ok(inputs[0]);
        }
        let parts: Vec<&Tensor> = inputs.iter().map(|&i| self.value(i)).collect();
        let v = Tensor::concat(&parts, axis)?;
        let rg = self.rg(inputs);
        Ok(self.push(
            v,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        if start == 0 && self.shape(a).get(axis) == Some(&len) {
            return Ok(a);
        }
        let v = self.value(a).slice(axis, start, len)?;
        let rg = self.rg(&[a]);
        Ok(self.push(
            v,
            Op::Slice {
                input: a,
                axis,
                start,
            },
            rg,
        ))
    }

    pub fn repeat_rows(&mut self, a: NodeId, n: usize) -> Result<NodeId> {
        let v = self.value(a).repeat_rows(n)?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::RepeatRows(a), rg))
    }

    /// Adds a `[C]` bias to every row of a `[..., C]` tensor via an explicit repeat.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap_or(&1);
        let rows = self.value(x).len() / c;
        let b = self.reshape(bias, &[1, c])?;
        let b = self.repeat_rows(b, rows)?;
        let b = self.reshape(b, &shape)?;
        self.add(x, b)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(v, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let v = self.value(a).mean(axis)?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::Mean { input: a, axis }, rg))
    }

    /// Softmax along the last axis.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        let v = x.softmax(x.rank() - 1)?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::SoftmaxRows(a), rg))
    }

    /// Softmax over each row of a `[n, m]` tensor restricted to the entries
    /// `(i, j)` for which `allowed(i, j)` holds; the rest get exactly zero
    /// weight. The arithmetic matches [`Tensor::softmax`] applied to scores
    /// with `-inf` written into the disallowed entries, bit for bit.
    pub fn masked_softmax_rows(
        &mut self,
        a: NodeId,
        allowed: &dyn Fn(usize, usize) -> bool,
        empty: EmptyRows,
    ) -> Result<NodeId> {
        let x = self.value(a);
        if x.rank() != 2 {
            return Err(Error::invalid(
                "masked_softmax",
                format!("expects [n,m], got {:?}", x.shape()),
            ));
        }
        let (n, m) = (x.dim(0), x.dim(1));
        let src = x.data();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &src[i * m..(i + 1) * m];
            let dst = &mut out[i * m..(i + 1) * m];
            let mut max = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if allowed(i, j) {
                    max = max.max(v);
                }
            }
            if max == f64::NEG_INFINITY {
                match empty {
                    EmptyRows::Error => {
                        return Err(Error::DegenerateRow {
                            op: "masked_softmax",
                            row: i,
                        })
                    }
                    EmptyRows::Zero => continue,
                }
            }
            let mut sum = 0.0;
            for (j, &v) in row.iter().enumerate() {
                if allowed(i, j) {
                    let e = (v - max).exp();
                    dst[j] = e;
                    sum += e;
                }
            }
            let inv = 1.0 / sum;
            for d in dst.iter_mut() {
                *d *= inv;
            }
        }
        let v = Tensor::from_parts(vec![n, m], out);
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::SoftmaxRows(a), rg))
    }

    fn conv_with(&mut self, x: NodeId, k: NodeId, geom: ConvGeometry) -> Result<NodeId> {
        let (v, cols) = conv_apply(self.value(x), self.value(k), &geom)?;
        let rg = self.rg(&[x, k]);
        let cols = if rg { cols } else { Tensor::scalar(0.0) };
        Ok(self.push(
            v,
            Op::Conv {
                x,
                k,
                geom: Box::new(geom),
                cols,
            },
            rg,
        ))
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        k: NodeId,
        stride: usize,
        padding: Padding,
    ) -> Result<NodeId> {
        let geom = conv2d_geometry(self.shape(x), self.shape(k), stride, padding)?;
        self.conv_with(x, k, geom)
    }

    pub fn conv3d(
        &mut self,
        x: NodeId,
        k: NodeId,
        stride: usize,
        padding: Padding,
    ) -> Result<NodeId> {
        let geom = conv3d_geometry(self.shape(x), self.shape(k), stride, padding)?;
        self.conv_with(x, k, geom)
    }

    /// Bilinear resize of `[T,H,W,C]` (see [`crate::tensor::resize_bilinear`]).
    pub fn resize(&mut self, x: NodeId, out_h: usize, out_w: usize) -> Result<NodeId> {
        if self.shape(x)[1..3] == [out_h, out_w] {
            return Ok(x);
        }
        let v = resize_bilinear(self.value(x), out_h, out_w)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Resize(x), rg))
    }

    pub fn group_norm(
        &mut self,
        x: NodeId,
        groups: usize,
        eps: f64,
        gain: NodeId,
        bias: NodeId,
    ) -> Result<NodeId> {
        let (v, stats) = group_norm_with_stats(
            self.value(x),
            groups,
            eps,
            self.value(gain),
            self.value(bias),
        )?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            v,
            Op::GroupNorm {
                x,
                gain,
                bias,
                stats: Box::new(stats),
            },
            rg,
        ))
    }

    /// Layer norm over the last axis of `[N, C]` tokens.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        eps: f64,
        gain: NodeId,
        bias: NodeId,
    ) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap_or(&1);
        let rows = self.value(x).len() / c;
        let r = self.reshape(x, &[rows, 1, c])?;
        let y = self.group_norm(r, 1, eps, gain, bias)?;
        self.reshape(y, &shape)
    }

    /// Pushes a fused scalar loss whose logit gradient was computed eagerly.
    pub(crate) fn push_loss(&mut self, logits: NodeId, value: f64, dlogits: Tensor) -> NodeId {
        let rg = self.rg(&[logits]);
        self.push(Tensor::scalar(value), Op::Loss { logits, dlogits }, rg)
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Returns gradients for every trainable named leaf (zeros when a
    /// parameter does not influence the loss); frozen parameters and inputs
    /// are absent.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_parts(self.shape(loss).to_vec(), vec![1.0]));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let mut by_name = BTreeMap::new();
        for (name, &id) in &self.params {
            let node = &self.nodes[id.0];
            if node.requires_grad {
                let g = grads[id.0]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                by_name.insert(name.clone(), g);
            }
        }
        Ok(Gradients {
            by_node: grads,
            by_name,
        })
    }

    fn propagate(
        &self,
        op: &Op,
        out: &Tensor,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let mut acc = |id: NodeId, t: Tensor| -> Result<()> {
            if !self.nodes[id.0].requires_grad {
                return Ok(());
            }
            match &mut grads[id.0] {
                Some(existing) => {
                    for (e, v) in existing.data_mut().iter_mut().zip(t.data()) {
                        *e += v;
                    }
                }
                slot @ None => *slot = Some(t),
            }
            Ok(())
        };
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.clone())?;
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                acc(*a, g.mul(self.value(*b))?)?;
                acc(*b, g.mul(self.value(*a))?)?;
            }
            Op::Scale(a, c) => acc(*a, g.scale(*c))?,
            Op::AddScalar(a) => acc(*a, g.clone())?,
            Op::Relu(a) => {
                let x = self.value(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect();
                acc(*a, Tensor::from_parts(x.shape().to_vec(), d))?;
            }
            Op::Ln(a) => {
                let x = self.value(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| gv / xv)
                    .collect();
                acc(*a, Tensor::from_parts(x.shape().to_vec(), d))?;
            }
            Op::Matmul(a, b) => {
                if self.requires_grad(*a) {
                    acc(*a, g.matmul(&self.value(*b).transpose()?)?)?;
                }
                if self.requires_grad(*b) {
                    acc(*b, self.value(*a).transpose()?.matmul(g)?)?;
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose()?)?,
            Op::Reshape(a) => acc(*a, g.reshape(self.shape(*a))?)?,
            Op::Concat { inputs, axis } => {
                let mut start = 0;
                for &i in inputs {
                    let len = self.shape(i)[*axis];
                    if self.requires_grad(i) {
                        acc(i, g.slice(*axis, start, len)?)?;
                    }
                    start += len;
                }
            }
            Op::Slice { input, axis, start } => {
                let in_shape = self.shape(*input);
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let (ext, len) = (in_shape[*axis], g.shape()[*axis]);
                let mut d = vec![0.0; self.value(*input).len()];
                for o in 0..outer {
                    let src = &g.data()[o * len * inner..(o + 1) * len * inner];
                    let base = (o * ext + start) * inner;
                    d[base..base + len * inner].copy_from_slice(src);
                }
                acc(*input, Tensor::from_parts(in_shape.to_vec(), d))?;
            }
            Op::RepeatRows(a) => {
                let shape = self.shape(*a).to_vec();
                let row = self.value(*a).len();
                let mut d = vec![0.0; row];
                for chunk in g.data().chunks(row) {
                    for (x, &v) in d.iter_mut().zip(chunk) {
                        *x += v;
                    }
                }
                acc(*a, Tensor::from_parts(shape, d))?;
            }
            Op::Sum(a) => acc(*a, Tensor::full(self.shape(*a), g.item()))?,
            Op::Mean { input, axis } => {
                let in_shape = self.shape(*input);
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let ext = in_shape[*axis];
                let inv = 1.0 / ext as f64;
                let mut d = vec![0.0; self.value(*input).len()];
                for o in 0..outer {
                    for a in 0..ext {
                        for i in 0..inner {
                            d[(o * ext + a) * inner + i] = g.data()[o * inner + i] * inv;
                        }
                    }
                }
                acc(*input, Tensor::from_parts(in_shape.to_vec(), d))?;
            }
            Op::SoftmaxRows(a) => {
                let m = out.last_dim();
                let mut d = vec![0.0; out.len()];
                for ((dr, yr), gr) in d
                    .chunks_mut(m)
                    .zip(out.data().chunks(m))
                    .zip(g.data().chunks(m))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for ((dv, &y), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *dv = y * (gv - dot);
                    }
                }
                acc(*a, Tensor::from_parts(out.shape().to_vec(), d))?;
            }
            Op::Conv { x, k, geom, cols } => {
                let kt = self.value(*k);
                let cin = self.value(*x).last_dim();
                let cout = kt.last_dim();
                let gm = g.reshape(&[geom.rows(), cout])?;
                if self.requires_grad(*k) {
                    let gk = cols.transpose()?.matmul(&gm)?;
                    acc(*k, gk.reshape(kt.shape())?)?;
                }
                if self.requires_grad(*x) {
                    let kmat = kt.reshape(&[geom.taps() * cin, cout])?;
                    let gcols = gm.matmul(&kmat.transpose()?)?;
                    let gx = geom.col2im(gcols.data(), cin);
                    acc(*x, Tensor::from_parts(self.shape(*x).to_vec(), gx))?;
                }
            }
            Op::Resize(x) => {
                let s = self.shape(*x);
                acc(*x, resize_bilinear_adjoint(g, s[1], s[2]))?;
            }
            Op::GroupNorm {
                x,
                gain,
                bias,
                stats,
            } => {
                let c = out.last_dim();
                let xhat = stats.xhat.data();
                let gd = g.data();
                let gain_v = self.value(*gain).data();
                if self.requires_grad(*gain) || self.requires_grad(*bias) {
                    let mut gg = vec![0.0; c];
                    let mut gb = vec![0.0; c];
                    for (i, (&gv, &h)) in gd.iter().zip(xhat).enumerate() {
                        gg[i % c] += gv * h;
                        gb[i % c] += gv;
                    }
                    acc(*gain, Tensor::from_parts(vec![c], gg))?;
                    acc(*bias, Tensor::from_parts(vec![c], gb))?;
                }
                if self.requires_grad(*x) {
                    let n = out.dim(0);
                    let per_sample = out.len() / n;
                    let positions = per_sample / c;
                    let cg = c / stats.groups;
                    let count = (positions * cg) as f64;
                    let mut d = vec![0.0; out.len()];
                    for s in 0..n {
                        let base = s * per_sample;
                        for grp in 0..stats.groups {
                            let istd = stats.inv_std[s * stats.groups + grp];
                            let chans = grp * cg..(grp + 1) * cg;
                            let (mut m1, mut m2) = (0.0, 0.0);
                            for p in 0..positions {
                                for ch in chans.clone() {
                                    let i = base + p * c + ch;
                                    let gh = gd[i] * gain_v[ch];
                                    m1 += gh;
                                    m2 += gh * xhat[i];
                                }
                            }
                            m1 /= count;
                            m2 /= count;
                            for p in 0..positions {
                                for ch in chans.clone() {
                                    let i = base + p * c + ch;
                                    let gh = gd[i] * gain_v[ch];
                                    d[i] = istd * (gh - m1 - xhat[i] * m2);
                                }
                            }
                        }
                    }
                    acc(*x, Tensor::from_parts(out.shape().to_vec(), d))?;
                }
            }
            Op::Loss { logits, dlogits } => acc(*logits, dlogits.scale(g.item()))?,
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn linear_loss_gradient_is_input_structure() {
        // loss = sum(W x) with W [2,3], x [3,1] => dloss/dW[i,j] = x[j]
        let mut g = Graph::new();
        let w = g.variable("w", Rng::new(1).normal_tensor(&[2, 3], 1.0), true);
        let x = g.input(Tensor::from_vec(&[3, 1], vec![1.0, -2.0, 0.5]).unwrap());
        let y = g.matmul(w, x).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(
            grads.get("w").unwrap().data(),
            &[1.0, -2.0, 0.5, 1.0, -2.0, 0.5]
        );
    }

    #[test]
    fn frozen_leaf_gets_no_gradient() {
        let mut g = Graph::new();
        let a = g.variable("a", Tensor::ones(&[2]), true);
        let b = g.variable("b", Tensor::ones(&[2]), false);
        let c = g.mul(a, b).unwrap();
        let loss = g.sum(c);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get("a").is_some());
        assert!(grads.get("b").is_none());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let a = g.variable("a", Tensor::ones(&[2]), true);
        assert!(g.backward(a).is_err());
    }

    #[test]
    fn unused_trainable_param_gets_zeros() {
        let mut g = Graph::new();
        let a = g.variable("a", Tensor::ones(&[2]), true);
        let _unused = g.variable("u", Tensor::ones(&[3]), true);
        let loss = g.sum(a);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get("u").unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn masked_softmax_matches_dense_neg_inf() {
        let mut rng = Rng::new(3);
        let s = rng.normal_tensor(&[6, 6], 2.0);
        let allowed = |i: usize, j: usize| i / 2 != j / 2;
        let mut dense = s.clone();
        for i in 0..6 {
            for j in 0..6 {
                if !allowed(i, j) {
                    dense.data_mut()[i * 6 + j] = f64::NEG_INFINITY;
                }
            }
        }
        let want = dense.softmax(1).unwrap();
        let mut g = Graph::new();
        let x = g.input(s);
        let y = g
            .masked_softmax_rows(x, &allowed, EmptyRows::Error)
            .unwrap();
        assert!(g.value(y).bit_eq(&want));
    }

    #[test]
    fn empty_rows_error_or_zero() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[2, 2]));
        let allowed = |i: usize, _j: usize| i == 1;
        assert!(matches!(
            g.masked_softmax_rows(x, &allowed, EmptyRows::Error),
            Err(Error::DegenerateRow { row: 0, .. })
        ));
        let y = g.masked_softmax_rows(x, &allowed, EmptyRows::Zero).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.5, 0.5]);
    }

    #[test]
    fn kink_tracking_counts_near_zero_inputs() {
        let mut g = Graph::new();
        g.track_kinks(1e-4);
        let x = g.input(Tensor::from_vec(&[3], vec![0.0, 1e-6, 0.5]).unwrap());
        g.relu(x);
        assert_eq!(g.near_kinks(), 2);
    }

    #[test]
    fn batch_gradient_is_sum_of_item_gradients() {
        // Linearity of the gradient over a sum of per-item losses.
        let mut rng = Rng::new(10);
        let w = rng.normal_tensor(&[3, 2], 1.0);
        let items: Vec<Tensor> = (0..3).map(|_| rng.normal_tensor(&[1, 3], 1.0)).collect();
        let item_loss = |g: &mut Graph, w: NodeId, x: &Tensor| {
            let x = g.input(x.clone());
            let y = g.matmul(x, w).unwrap();
            let y = g.softmax_rows(y).unwrap();
            let y = g.mul(y, y).unwrap();
            g.sum(y)
        };
        let mut g = Graph::new();
        let wn = g.variable("w", w.clone(), true);
        let losses: Vec<NodeId> = items.iter().map(|x| item_loss(&mut g, wn, x)).collect();
        let l01 = g.add(losses[0], losses[1]).unwrap();
        let total = g.add(l01, losses[2]).unwrap();
        let batch = g.backward(total).unwrap();
        let mut sum = Gradients::default();
        for x in &items {
            let mut g = Graph::new();
            let wn = g.variable("w", w.clone(), true);
            let l = item_loss(&mut g, wn, x);
            sum.accumulate(&g.backward(l).unwrap()).unwrap();
        }
        assert!(batch.get("w").unwrap().max_abs_diff(sum.get("w").unwrap()) < 1e-14);
    }
}
