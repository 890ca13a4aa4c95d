use std::collections::BTreeMap;

use crate::autodiff::graph::Gradients;
use crate::autodiff::params::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check_shape(name: &str, p: &Tensor, g: &Tensor) -> Result<()> {
    if p.shape() != g.shape() {
        return Err(Error::Shape {
            op: "optimizer",
            lhs: p.shape().to_vec(),
            rhs: g.shape().to_vec(),
        })
        .map_err(|e| Error::Config(format!("`{name}`: {e}")));
    }
    Ok(())
}

/// Plain SGD with decoupled weight decay: `p <- p (1 - lr wd) - lr g`.
///
/// Frozen parameters and parameters without a gradient entry are untouched.
pub fn sgd_step(
    params: &mut ParamStore,
    grads: &Gradients,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    for (name, g) in grads.iter() {
        let Some(p) = params.get(name) else { continue };
        if !p.trainable {
            continue;
        }
        check_shape(name, &p.value, g)?;
        let decay = 1.0 - lr * weight_decay;
        let data = p
            .value
            .data()
            .iter()
            .zip(g.data())
            .map(|(&w, &gv)| w * decay - lr * gv)
            .collect();
        params.set(name, Tensor::from_vec(p.value.shape(), data)?)?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct AdamWConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// AdamW with bias-corrected moments and decoupled weight decay.
///
/// Per step, for each trainable parameter with a gradient:
///
/// ```text
/// p <- p * (1 - lr * wd)
/// m <- b1 m + (1 - b1) g,   v <- b2 v + (1 - b2) g^2
/// p <- p - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
/// ```
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<()> {
        let lr = self.config.lr;
        self.step_with_lr(params, grads, lr)
    }

    pub fn step_with_lr(
        &mut self,
        params: &mut ParamStore,
        grads: &Gradients,
        lr: f64,
    ) -> Result<()> {
        self.step += 1;
        let (b1, b2) = self.config.betas;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let decay = 1.0 - lr * self.config.weight_decay;
        for (name, g) in grads.iter() {
            let Some(p) = params.get(name) else { continue };
            if !p.trainable {
                continue;
            }
            check_shape(name, &p.value, g)?;
            let n = g.len();
            let (m, v) = self
                .moments
                .entry(name.to_owned())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let mut data = p.value.data().to_vec();
            for i in 0..n {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] = data[i] * decay - lr * mhat / (vhat.sqrt() + self.config.eps);
            }
            params.set(name, Tensor::from_vec(p.value.shape(), data)?)?;
        }
        Ok(())
    }
}
