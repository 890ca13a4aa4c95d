//! Small per-frame convolutional backbone with strides 4, 8, 16 and 32.
//!
//! Each stage is a non-overlapping patch convolution (kernel = stride, no
//! spatial padding) followed by group norm and ReLU. Non-overlapping patches
//! keep a spatially constant input constant at every scale. The stem can
//! optionally span three frames (zero padded in time), a 3-D patch embedding
//! that lets the first features see frame-to-frame change.

use crate::autodiff::{Graph, NodeId, ParamStore};
use crate::error::{Error, Result};
use crate::nn::{Conv, GroupNorm};
use crate::rng::Rng;
use crate::tensor::Padding;

pub const STRIDES: [usize; 4] = [4, 8, 16, 32];

#[derive(Debug, Clone)]
pub struct Backbone {
    stages: Vec<(Conv, GroupNorm)>,
    pub widths: [usize; 4],
}

impl Backbone {
    pub fn new(
        name: &str,
        in_channels: usize,
        widths: [usize; 4],
        temporal_stem: bool,
    ) -> Result<Self> {
        if widths.iter().any(|&w| w == 0 || w % 4 != 0) {
            return Err(Error::Config(format!(
                "backbone widths must be positive multiples of 4, got {widths:?}"
            )));
        }
        let mut stages = Vec::with_capacity(4);
        let mut cin = in_channels;
        for (i, &w) in widths.iter().enumerate() {
            let k = if i == 0 { 4 } else { 2 };
            let conv = if i == 0 && temporal_stem {
                Conv {
                    kernel: vec![3, k, k],
                    stride: k,
                    padding: Padding::Same,
                    ..Conv::new3d(format!("{name}.s1"), [3, k, k], cin, w)
                }
            } else {
                Conv::new2d(format!("{name}.s{}", i + 1), k, cin, w, k, Padding::Valid)
            };
            stages.push((conv, GroupNorm::new(format!("{name}.gn{}", i + 1), w)));
            cin = w;
        }
        Ok(Backbone { stages, widths })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        for (c, n) in &self.stages {
            c.init(store, rng)?;
            n.init(store)?;
        }
        Ok(())
    }

    /// Checks that `h` and `w` are divisible by the coarsest stride.
    pub fn check_input(h: usize, w: usize) -> Result<()> {
        let s = STRIDES[3];
        if h % s != 0 || w % s != 0 {
            let ph = (s - h % s) % s;
            let pw = (s - w % s) % s;
            return Err(Error::Config(format!(
                "input {h}x{w} is not divisible by {s}; pad by {ph} rows and {pw} columns (to {}x{})",
                h + ph,
                w + pw
            )));
        }
        Ok(())
    }

    /// `clip: [T,H,W,C]` to four feature maps, fine to coarse.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, clip: NodeId) -> Result<Vec<NodeId>> {
        let s = g.shape(clip).to_vec();
        if s.len() != 4 {
            return Err(Error::invalid(
                "backbone",
                format!("expects [T,H,W,C], got {s:?}"),
            ));
        }
        Self::check_input(s[1], s[2])?;
        let mut x = clip;
        let mut out = Vec::with_capacity(4);
        for (c, n) in &self.stages {
            let y = c.forward(g, store, x)?;
            let y = n.forward(g, store, y)?;
            x = g.relu(y);
            out.push(x);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn build(temporal: bool) -> (Backbone, ParamStore) {
        let bb = Backbone::new("bb", 3, [16, 32, 64, 64], temporal).unwrap();
        let mut store = ParamStore::new();
        bb.init(&mut store, &mut Rng::new(1)).unwrap();
        (bb, store)
    }

    #[test]
    fn stride_contract() {
        for temporal in [false, true] {
            let (bb, store) = build(temporal);
            let mut g = Graph::new();
            let x = g.input(Rng::new(2).uniform_tensor(&[6, 64, 64, 3], 0.0, 1.0));
            let f = bb.forward(&mut g, &store, x).unwrap();
            let shapes: Vec<&[usize]> = f.iter().map(|&n| g.shape(n)).collect();
            assert_eq!(
                shapes,
                vec![
                    &[6, 16, 16, 16][..],
                    &[6, 8, 8, 32],
                    &[6, 4, 4, 64],
                    &[6, 2, 2, 64]
                ]
            );
        }
    }

    #[test]
    fn constant_input_gives_constant_features() {
        for temporal in [false, true] {
            let (bb, store) = build(temporal);
            let mut g = Graph::new();
            let x = g.input(Tensor::full(&[3, 64, 64, 3], 0.4));
            for f in bb.forward(&mut g, &store, x).unwrap() {
                let v = g.value(f);
                let per_frame = v.len() / v.dim(0);
                let c = v.last_dim();
                for frame in v.data().chunks(per_frame) {
                    for px in frame.chunks(c) {
                        assert_eq!(px, &frame[..c]);
                    }
                }
            }
        }
    }

    #[test]
    fn deterministic_across_runs() {
        let x = Rng::new(3).uniform_tensor(&[2, 32, 32, 3], 0.0, 1.0);
        let run = || {
            let (bb, store) = build(true);
            let mut g = Graph::new();
            let xi = g.input(x.clone());
            let f = bb.forward(&mut g, &store, xi).unwrap();
            g.value(f[3]).clone()
        };
        assert!(run().bit_eq(&run()));
    }

    #[test]
    fn indivisible_input_names_the_padding() {
        let err = Backbone::check_input(70, 64).unwrap_err().to_string();
        assert!(err.contains("pad by 26 rows"), "{err}");
    }
}
