//! Clip-level inference: centred sliding windows and multiscale averaging.

use rayon::prelude::*;

use crate::autodiff::{Graph, ParamStore};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalReport, VideoEval, BOUNDARY_RADIUS};
use crate::model::MedVt;
use crate::synthclip::Scene;
use crate::tensor::{resize_bilinear, Tensor};

/// Inputs are rescaled to multiples of this.
pub const SIZE_MULTIPLE: usize = 32;

/// Multipliers used for multiscale post-processing.
pub const DEFAULT_SCALES: [f64; 6] = [0.7, 0.8, 0.9, 1.0, 1.1, 1.2];

/// Position of the predicted frame inside a window of `t` frames.
pub fn centre_offset(t: usize) -> usize {
    t.div_ceil(2).saturating_sub(1)
}

/// Frame indices of the window centred on `target`, with edge replication.
pub fn window_indices(len: usize, t: usize, target: usize) -> Vec<usize> {
    let o = centre_offset(t) as isize;
    (0..t as isize)
        .map(|j| (target as isize - o + j).clamp(0, len as isize - 1) as usize)
        .collect()
}

/// `dim * scale` rounded to the nearest multiple of 32, ties up.
pub fn scaled_extent(dim: usize, scale: f64) -> Result<usize> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::Config(format!(
            "scale must be positive, got {scale}"
        )));
    }
    let m = SIZE_MULTIPLE as f64;
    let v = ((dim as f64 * scale / m + 0.5).floor() * m) as usize;
    if v < SIZE_MULTIPLE {
        return Err(Error::Config(format!(
            "scale {scale} maps {dim} px to {v}, below the minimum of {SIZE_MULTIPLE}"
        )));
    }
    Ok(v)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// `[L,H,W,C]` averaged logits.
    pub logits: Tensor,
    /// `L*H*W` class indices.
    pub labels: Vec<u8>,
}

impl Prediction {
    pub fn frame(&self, t: usize) -> &[u8] {
        let n = self.logits.dim(1) * self.logits.dim(2);
        &self.labels[t * n..(t + 1) * n]
    }
}

fn gather(frames: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let parts: Vec<Tensor> = idx
        .iter()
        .map(|&i| frames.slice(0, i, 1))
        .collect::<Result<_>>()?;
    Tensor::concat(&parts.iter().collect::<Vec<_>>(), 0)
}

/// Per-frame logits `[L,H,W,C]` with every frame predicted from its own
/// centred window, after resizing the video to `h × w`.
fn video_logits(
    model: &MedVt,
    store: &ParamStore,
    frames: &Tensor,
    h: usize,
    w: usize,
) -> Result<Tensor> {
    let (len, oh, ow) = (frames.dim(0), frames.dim(1), frames.dim(2));
    let input = if (h, w) == (oh, ow) {
        frames.clone()
    } else {
        resize_bilinear(frames, h, w)?
    };
    let t = model.cfg.frames;
    let o = centre_offset(t);
    let per: Vec<Tensor> = (0..len)
        .into_par_iter()
        .map(|f| {
            let win = gather(&input, &window_indices(len, t, f))?;
            let coarse = model.coarse_logits(store, &win)?.slice(0, o, 1)?;
            resize_bilinear(&coarse, oh, ow)
        })
        .collect::<Result<_>>()?;
    Tensor::concat(&per.iter().collect::<Vec<_>>(), 0)
}

fn check_video(frames: &Tensor) -> Result<()> {
    if frames.rank() != 4 || frames.dim(0) == 0 {
        return Err(Error::invalid(
            "infer",
            format!("expects [L,H,W,C] with L >= 1, got {:?}", frames.shape()),
        ));
    }
    Ok(())
}

fn finish(logits: Tensor) -> Prediction {
    let labels = logits.argmax_last().into_iter().map(|c| c as u8).collect();
    Prediction { logits, labels }
}

/// Sliding-window inference at the native resolution.
pub fn infer_video(model: &MedVt, store: &ParamStore, frames: &Tensor) -> Result<Prediction> {
    check_video(frames)?;
    Ok(finish(video_logits(
        model,
        store,
        frames,
        frames.dim(1),
        frames.dim(2),
    )?))
}

/// Averages logits over rescaled copies of the video, then takes the argmax.
pub fn multiscale_infer(
    model: &MedVt,
    store: &ParamStore,
    frames: &Tensor,
    scales: &[f64],
) -> Result<Prediction> {
    check_video(frames)?;
    if scales.is_empty() {
        return Err(Error::Config(
            "at least one inference scale is required".into(),
        ));
    }
    let (h, w) = (frames.dim(1), frames.dim(2));
    let sizes: Vec<(usize, usize)> = scales
        .iter()
        .map(|&s| Ok((scaled_extent(h, s)?, scaled_extent(w, s)?)))
        .collect::<Result<_>>()?;
    let mut sum: Option<Tensor> = None;
    for &(sh, sw) in &sizes {
        let l = video_logits(model, store, frames, sh, sw)?;
        sum = Some(match sum {
            None => l,
            Some(acc) => acc.add(&l)?,
        });
    }
    let mean = sum.expect("non-empty").scale(1.0 / scales.len() as f64);
    Ok(finish(mean))
}

/// Object attention `F^A` of every frame's centred window at that frame,
/// `[L, H/4, W/4, N_h]`, at the native resolution.
pub fn attention_maps(model: &MedVt, store: &ParamStore, frames: &Tensor) -> Result<Tensor> {
    check_video(frames)?;
    let len = frames.dim(0);
    let t = model.cfg.frames;
    let per: Vec<Tensor> = (0..len)
        .into_par_iter()
        .map(|f| {
            let win = gather(frames, &window_indices(len, t, f))?;
            let mut g = Graph::new();
            let x = g.input(win);
            let out = model.forward(&mut g, store, x, false)?;
            g.value(out.decoder.attention_map)
                .slice(0, centre_offset(t), 1)
        })
        .collect::<Result<_>>()?;
    Tensor::concat(&per.iter().collect::<Vec<_>>(), 0)
}

/// Predicts every scene at `scales` and scores the result against its
/// masks. `scenes` pairs each clip with its category.
pub fn evaluate_scenes(
    model: &MedVt,
    store: &ParamStore,
    scenes: &[(&str, &Scene)],
    scales: &[f64],
) -> Result<EvalReport> {
    let preds = scenes
        .iter()
        .map(|(_, s)| multiscale_infer(model, store, &s.clip, scales))
        .collect::<Result<Vec<_>>>()?;
    let videos: Vec<VideoEval> = scenes
        .iter()
        .zip(&preds)
        .map(|((category, s), p)| VideoEval {
            category,
            height: s.clip.dim(1),
            width: s.clip.dim(2),
            pred: &p.labels,
            gt: &s.masks,
            boxes: &s.boxes,
        })
        .collect();
    evaluate(&videos, BOUNDARY_RADIUS)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::rng::Rng;

    fn micro() -> (MedVt, ParamStore) {
        let model = MedVt::new(ModelConfig::micro()).unwrap();
        let store = model.init(4).unwrap();
        (model, store)
    }

    #[test]
    fn window_listing_for_eight_frames_of_six() {
        let want: [[usize; 6]; 8] = [
            [0, 0, 0, 1, 2, 3],
            [0, 0, 1, 2, 3, 4],
            [0, 1, 2, 3, 4, 5],
            [1, 2, 3, 4, 5, 6],
            [2, 3, 4, 5, 6, 7],
            [3, 4, 5, 6, 7, 7],
            [4, 5, 6, 7, 7, 7],
            [5, 6, 7, 7, 7, 7],
        ];
        for (f, w) in want.iter().enumerate() {
            assert_eq!(window_indices(8, 6, f), w.to_vec(), "frame {f}");
        }
        assert_eq!(centre_offset(6), 2);
        assert_eq!(centre_offset(1), 0);
        assert_eq!(window_indices(1, 4, 0), vec![0; 4]);
    }

    #[test]
    fn scaled_extents_round_to_32() {
        assert_eq!(scaled_extent(64, 1.0).unwrap(), 64);
        assert_eq!(scaled_extent(64, 0.75).unwrap(), 64); // 48 ties up
        assert_eq!(scaled_extent(64, 0.7).unwrap(), 32);
        assert_eq!(scaled_extent(64, 1.2).unwrap(), 64);
        assert_eq!(scaled_extent(384, 1.2).unwrap(), 448);
        assert!(scaled_extent(32, 0.4).is_err());
        assert!(scaled_extent(32, 0.0).is_err());
    }

    #[test]
    fn output_length_matches_input_for_any_length() {
        let (model, store) = micro();
        let mut rng = Rng::new(1);
        for len in [1, 2, 3] {
            let v = rng.uniform_tensor(&[len, 32, 32, 3], 0.0, 1.0);
            let p = infer_video(&model, &store, &v).unwrap();
            assert_eq!(p.logits.shape(), &[len, 32, 32, 2]);
            assert_eq!(p.labels.len(), len * 32 * 32);
        }
    }

    #[test]
    fn constant_video_gives_constant_prediction_over_time() {
        let (model, store) = micro();
        let v = Tensor::full(&[3, 32, 32, 3], 0.4);
        let p = infer_video(&model, &store, &v).unwrap();
        assert_eq!(p.frame(0), p.frame(1));
        assert_eq!(p.frame(1), p.frame(2));
    }

    #[test]
    fn single_and_duplicate_scales_match_plain_inference() {
        let (model, store) = micro();
        let v = Rng::new(2).uniform_tensor(&[3, 32, 32, 3], 0.0, 1.0);
        let base = infer_video(&model, &store, &v).unwrap();
        let one = multiscale_infer(&model, &store, &v, &[1.0]).unwrap();
        assert!(one.logits.bit_eq(&base.logits));
        assert_eq!(one.labels, base.labels);
        let two = multiscale_infer(&model, &store, &v, &[1.0, 1.0]).unwrap();
        assert!(two.logits.bit_eq(&base.logits));
        let paper = multiscale_infer(&model, &store, &v, &DEFAULT_SCALES).unwrap();
        assert_eq!(paper.labels.len(), base.labels.len());
        assert!(multiscale_infer(&model, &store, &v, &[0.3]).is_err());
    }

    #[test]
    fn attention_maps_cover_every_frame() {
        let (model, store) = micro();
        let v = Rng::new(3).uniform_tensor(&[3, 32, 32, 3], 0.0, 1.0);
        let a = attention_maps(&model, &store, &v).unwrap();
        assert_eq!(a.shape(), &[3, 8, 8, 2]);
        assert!(a.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn scene_evaluation_scores_a_generated_clip() {
        use crate::synthclip::{generate_split, GenOptions, Split};
        let (model, store) = micro();
        let opts = GenOptions {
            frames: 4,
            height: 32,
            width: 32,
            ..GenOptions::default()
        };
        let scenes = generate_split(1, 5, Split::Val, &opts).unwrap();
        let pairs: Vec<(&str, &Scene)> = scenes.iter().map(|(_, s)| ("disk", s)).collect();
        let r = evaluate_scenes(&model, &store, &pairs, &[1.0]).unwrap();
        assert!((0.0..=1.0).contains(&r.j_mean));
    }
}
