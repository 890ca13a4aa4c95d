//! Task head: two 3×3×3 convolutions with group norm and ReLU, then a
//! 1×1×1 convolution to class logits. Group norm statistics span the clip.

use crate::autodiff::{Graph, NodeId, ParamStore};
use crate::error::{Error, Result};
use crate::nn::{Conv, GroupNorm};
use crate::rng::Rng;

#[derive(Debug, Clone)]
pub struct TaskHead {
    convs: [Conv; 3],
    norms: [GroupNorm; 2],
    pub classes: usize,
}

impl TaskHead {
    pub fn new(name: &str, cin: usize, width: usize, classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Config(format!(
                "C_cls must be at least 2, got {classes}"
            )));
        }
        Ok(TaskHead {
            convs: [
                Conv::new3d(format!("{name}.c1"), [3, 3, 3], cin, width),
                Conv::new3d(format!("{name}.c2"), [3, 3, 3], width, width),
                Conv::new3d(format!("{name}.c3"), [1, 1, 1], width, classes),
            ],
            norms: [
                GroupNorm::new(format!("{name}.gn1"), width),
                GroupNorm::new(format!("{name}.gn2"), width),
            ],
            classes,
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        for c in &self.convs {
            c.init(store, rng)?;
        }
        for n in &self.norms {
            n.init(store)?;
        }
        Ok(())
    }

    /// `x: [T,H,W,C_in] -> [T,H,W,C_cls]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for (c, n) in self.convs.iter().zip(&self.norms) {
            let y = c.forward(g, store, h)?;
            let s = g.shape(y).to_vec();
            let flat = g.reshape(y, &[1, s[0] * s[1] * s[2], s[3]])?;
            let y = n.forward(g, store, flat)?;
            let y = g.reshape(y, &s)?;
            h = g.relu(y);
        }
        self.convs[2].forward(g, store, h)
    }
}
