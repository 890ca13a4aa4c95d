//! Small parameterized layers over the autodiff graph.
//!
//! Each layer is a plain description (name prefix plus sizes). `init`
//! registers its parameters in a [`ParamStore`]; `forward` looks them up by
//! name on a [`Graph`]. Parameter names are `{prefix}.{w,b,g}`.

use crate::autodiff::{Graph, NodeId, ParamStore};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Padding, Tensor};

pub const NORM_EPS: f64 = 1e-5;

/// Glorot-uniform matrix `[din, dout]`.
pub fn xavier(rng: &mut Rng, din: usize, dout: usize) -> Tensor {
    let a = (6.0 / (din + dout) as f64).sqrt();
    rng.uniform_tensor(&[din, dout], -a, a)
}

/// He-normal kernel of the given shape with fan-in `fan_in`.
pub fn he_normal(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor {
    rng.normal_tensor(shape, (2.0 / fan_in as f64).sqrt())
}

/// Names of the parameters that write into a residual stream: attention
/// output projections and the second feed-forward layer. Zeroing all of
/// them turns every residual block into the identity.
pub fn is_output_projection(name: &str) -> bool {
    name.ends_with(".wo") || name.contains(".fc2.")
}

/// Zeroes every residual output projection under `prefix`.
pub fn zero_output_projections(store: &mut ParamStore, prefix: &str) -> Result<usize> {
    let names: Vec<String> = store
        .names()
        .filter(|n| n.starts_with(prefix) && is_output_projection(n))
        .map(str::to_owned)
        .collect();
    for n in &names {
        let shape = store.value(n)?.shape().to_vec();
        store.set(n, Tensor::zeros(&shape))?;
    }
    Ok(names.len())
}

/// Group count used throughout: `C / 4` capped at 8.
pub fn default_groups(channels: usize) -> usize {
    (channels / 4).clamp(1, 8)
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub din: usize,
    pub dout: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(name: impl Into<String>, din: usize, dout: usize) -> Self {
        Linear {
            name: name.into(),
            din,
            dout,
            bias: true,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        store.insert(format!("{}.w", self.name), xavier(rng, self.din, self.dout))?;
        if self.bias {
            store.insert(format!("{}.b", self.name), Tensor::zeros(&[self.dout]))?;
        }
        Ok(())
    }

    /// `x: [N, din] -> [N, dout]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, &format!("{}.w", self.name))?;
        let y = g.matmul(x, w)?;
        if !self.bias {
            return Ok(y);
        }
        let b = g.param(store, &format!("{}.b", self.name))?;
        g.add_bias(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        LayerNorm {
            name: name.into(),
            dim,
        }
    }

    pub fn init(&self, store: &mut ParamStore) -> Result<()> {
        store.insert(format!("{}.g", self.name), Tensor::ones(&[self.dim]))?;
        store.insert(format!("{}.b", self.name), Tensor::zeros(&[self.dim]))
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let gain = g.param(store, &format!("{}.g", self.name))?;
        let bias = g.param(store, &format!("{}.b", self.name))?;
        g.layer_norm(x, NORM_EPS, gain, bias)
    }
}

/// Group norm over `[N, ..., C]`, one normalization per sample on axis 0.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub name: String,
    pub channels: usize,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        GroupNorm {
            name: name.into(),
            channels,
            groups: default_groups(channels),
        }
    }

    pub fn init(&self, store: &mut ParamStore) -> Result<()> {
        store.insert(format!("{}.g", self.name), Tensor::ones(&[self.channels]))?;
        store.insert(format!("{}.b", self.name), Tensor::zeros(&[self.channels]))
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let gain = g.param(store, &format!("{}.g", self.name))?;
        let bias = g.param(store, &format!("{}.b", self.name))?;
        g.group_norm(x, self.groups, NORM_EPS, gain, bias)
    }
}

/// 2-D (per frame) or 3-D convolution with bias over `[T,H,W,C]`.
#[derive(Debug, Clone)]
pub struct Conv {
    pub name: String,
    /// `[kh, kw]` or `[kt, kh, kw]`.
    pub kernel: Vec<usize>,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    pub padding: Padding,
}

impl Conv {
    pub fn new2d(
        name: impl Into<String>,
        k: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        padding: Padding,
    ) -> Self {
        Conv {
            name: name.into(),
            kernel: vec![k, k],
            cin,
            cout,
            stride,
            padding,
        }
    }

    pub fn new3d(name: impl Into<String>, k: [usize; 3], cin: usize, cout: usize) -> Self {
        Conv {
            name: name.into(),
            kernel: k.to_vec(),
            cin,
            cout,
            stride: 1,
            padding: Padding::Same,
        }
    }

    fn kernel_shape(&self) -> Vec<usize> {
        let mut s = self.kernel.clone();
        s.extend([self.cin, self.cout]);
        s
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        let fan_in = self.kernel.iter().product::<usize>() * self.cin;
        store.insert(
            format!("{}.w", self.name),
            he_normal(rng, &self.kernel_shape(), fan_in),
        )?;
        store.insert(format!("{}.b", self.name), Tensor::zeros(&[self.cout]))
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, &format!("{}.w", self.name))?;
        let y = match self.kernel.len() {
            2 => g.conv2d(x, w, self.stride, self.padding)?,
            3 => g.conv3d(x, w, self.stride, self.padding)?,
            n => return Err(Error::Config(format!("`{}`: {n}-d kernel", self.name))),
        };
        let b = g.param(store, &format!("{}.b", self.name))?;
        g.add_bias(y, b)
    }
}

/// Two-layer perceptron `fc2(relu(fc1(x)))`.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new(name: &str, d: usize, hidden: usize) -> Self {
        FeedForward {
            fc1: Linear::new(format!("{name}.fc1"), d, hidden),
            fc2: Linear::new(format!("{name}.fc2"), hidden, d),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        self.fc1.init(store, rng)?;
        self.fc2.init(store, rng)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let h = self.fc1.forward(g, store, x)?;
        let h = g.relu(h);
        self.fc2.forward(g, store, h)
    }
}
