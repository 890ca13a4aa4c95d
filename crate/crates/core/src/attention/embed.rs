//! Positional and scale embeddings.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, ParamStore};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const EMBED_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PeKind {
    Sinusoidal,
    Learnable,
}

impl std::str::FromStr for PeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sinusoidal" | "sinusoidal3d" => Ok(PeKind::Sinusoidal),
            "learnable" => Ok(PeKind::Learnable),
            _ => Err(Error::Config(format!("unknown embedding kind `{s}`"))),
        }
    }
}

/// Writes the sin/cos frequency ladder for `pos` into `out` (even length).
fn ladder(pos: f64, out: &mut [f64]) {
    let n = out.len();
    for k in 0..n / 2 {
        let freq = 1.0 / 10000f64.powf(2.0 * k as f64 / n as f64);
        out[2 * k] = (pos * freq).sin();
        out[2 * k + 1] = (pos * freq).cos();
    }
}

/// 1-D sinusoidal table `[n, d]`; `d` must be even.
pub fn sinusoidal_1d(n: usize, d: usize) -> Result<Tensor> {
    if d == 0 || d % 2 != 0 {
        return Err(Error::Config(format!(
            "sinusoidal embedding needs an even dimension, got {d}"
        )));
    }
    let mut data = vec![0.0; n * d];
    for (p, row) in data.chunks_mut(d).enumerate() {
        ladder(p as f64, row);
    }
    Tensor::from_vec(&[n, d], data)
}

/// 3-D sinusoidal table `[T*H*W, d]` in `(t, y, x)` row order.
///
/// `d` is split into three equal blocks for the t, y and x coordinates, each
/// holding an interleaved sin/cos ladder, so `d` must be a multiple of 6.
pub fn sinusoidal_3d(t: usize, h: usize, w: usize, d: usize) -> Result<Tensor> {
    if d == 0 || d % 6 != 0 {
        return Err(Error::Config(format!(
            "3-d sinusoidal embedding needs a dimension divisible by 6, got {d}"
        )));
    }
    let b = d / 3;
    let mut data = vec![0.0; t * h * w * d];
    let mut rows = data.chunks_mut(d);
    for ti in 0..t {
        for yi in 0..h {
            for xi in 0..w {
                let row = rows.next().expect("row count");
                ladder(ti as f64, &mut row[..b]);
                ladder(yi as f64, &mut row[b..2 * b]);
                ladder(xi as f64, &mut row[2 * b..]);
            }
        }
    }
    Tensor::from_vec(&[t * h * w, d], data)
}

/// Per-scale positional encoding `p_s` for a `[T,H,W]` token grid.
#[derive(Debug, Clone)]
pub struct PositionalEncoding {
    pub name: String,
    pub kind: PeKind,
    /// Grid the learnable table is stored at.
    pub grid: [usize; 3],
    pub d: usize,
}

impl PositionalEncoding {
    pub fn new(name: impl Into<String>, kind: PeKind, grid: [usize; 3], d: usize) -> Self {
        PositionalEncoding {
            name: name.into(),
            kind,
            grid,
            d,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        match self.kind {
            PeKind::Sinusoidal => {
                if self.d % 6 != 0 {
                    return Err(Error::Config(format!(
                        "3-d sinusoidal embedding needs a dimension divisible by 6, got {}",
                        self.d
                    )));
                }
                Ok(())
            }
            PeKind::Learnable => {
                let [t, h, w] = self.grid;
                store.insert(
                    self.name.clone(),
                    rng.normal_tensor(&[t, h, w, self.d], EMBED_INIT_STD),
                )
            }
        }
    }

    /// Encoding for a `[t,h,w]` grid as `[t*h*w, d]`. A learnable table is
    /// bilinearly resampled when the spatial grid differs from the stored one.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        t: usize,
        h: usize,
        w: usize,
    ) -> Result<NodeId> {
        match self.kind {
            PeKind::Sinusoidal => Ok(g.input(sinusoidal_3d(t, h, w, self.d)?)),
            PeKind::Learnable => {
                if t != self.grid[0] {
                    return Err(Error::Config(format!(
                        "`{}` was learned for {} frames, got {t}",
                        self.name, self.grid[0]
                    )));
                }
                let p = g.param(store, &self.name)?;
                let p = g.resize(p, h, w)?;
                g.reshape(p, &[t * h * w, self.d])
            }
        }
    }
}

/// Learnable per-scale embedding `p^σ_s ∈ R^{1×d}`, repeated over all tokens.
#[derive(Debug, Clone)]
pub struct ScaleEmbedding {
    pub name: String,
    pub d: usize,
}

impl ScaleEmbedding {
    pub fn new(name: impl Into<String>, d: usize) -> Self {
        ScaleEmbedding {
            name: name.into(),
            d,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        store.insert(
            self.name.clone(),
            rng.normal_tensor(&[1, self.d], EMBED_INIT_STD),
        )
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, rows: usize) -> Result<NodeId> {
        let p = g.param(store, &self.name)?;
        g.repeat_rows(p, rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn origin_row_is_zero_phase() {
        let pe = sinusoidal_3d(2, 3, 3, 12).unwrap();
        let row0 = &pe.data()[..12];
        let want: Vec<f64> = (0..12)
            .map(|i| if i % 2 == 0 { 0.0 } else { 1.0 })
            .collect();
        assert_eq!(row0, want.as_slice());
    }

    #[test]
    fn injective_on_small_grid_and_bounded() {
        let (t, h, w, d) = (4, 4, 4, 48);
        let pe = sinusoidal_3d(t, h, w, d).unwrap();
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let rows: HashSet<Vec<u64>> = pe
            .data()
            .chunks(d)
            .map(|r| r.iter().map(|v| v.to_bits()).collect())
            .collect();
        assert_eq!(rows.len(), t * h * w);
    }

    #[test]
    fn indivisible_dimension_is_rejected() {
        assert!(sinusoidal_3d(1, 1, 1, 32).is_err());
        assert!(sinusoidal_3d(1, 1, 1, 384).is_ok());
        assert!(sinusoidal_1d(3, 5).is_err());
    }

    #[test]
    fn scale_embedding_rows_are_equal() {
        let mut store = ParamStore::new();
        let se = ScaleEmbedding::new("se", 6);
        se.init(&mut store, &mut Rng::new(3)).unwrap();
        let mut g = Graph::new();
        let p = se.forward(&mut g, &store, 5).unwrap();
        let v = g.value(p);
        assert_eq!(v.shape(), &[5, 6]);
        for r in v.data().chunks(6) {
            assert_eq!(r, store.value("se").unwrap().data());
        }
    }

    #[test]
    fn learnable_table_resamples_spatially() {
        let mut store = ParamStore::new();
        let pe = PositionalEncoding::new("pe", PeKind::Learnable, [2, 4, 4], 8);
        pe.init(&mut store, &mut Rng::new(5)).unwrap();
        let mut g = Graph::new();
        let same = pe.forward(&mut g, &store, 2, 4, 4).unwrap();
        assert_eq!(g.value(same).data(), store.value("pe").unwrap().data());
        let up = pe.forward(&mut g, &store, 2, 6, 6).unwrap();
        assert_eq!(g.shape(up), &[72, 8]);
        assert!(pe.forward(&mut g, &store, 3, 4, 4).is_err());
    }
}
