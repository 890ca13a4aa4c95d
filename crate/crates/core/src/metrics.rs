//! Segmentation metrics: region IoU (J) statistics, boundary F-measure, box
//! success rates and per-category means. Masks are `&[u8]` with nonzero
//! meaning foreground.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::synthclip::BoxYx;

/// IoU thresholds for the success rate.
pub const TAUS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

/// Default boundary matching radius in pixels.
pub const BOUNDARY_RADIUS: f64 = 1.0;

/// `|p ∩ g| / |p ∪ g|`; two empty masks score 1.
pub fn iou(pred: &[u8], gt: &[u8]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::shape("iou", &[pred.len()], &[gt.len()]));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (p != 0, g != 0);
        inter += usize::from(p && g);
        union += usize::from(p || g);
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SeqStats {
    pub mean: f64,
    /// Fraction of frames scoring above 0.5.
    pub recall: f64,
    /// First-quarter mean minus last-quarter mean, at least 0.
    pub decay: f64,
}

/// Mean, recall and decay of one video's per-frame scores. Quarters follow
/// an even split where the leading quarters take any remainder.
pub fn j_statistics(scores: &[f64]) -> Result<SeqStats> {
    if scores.is_empty() {
        return Err(Error::invalid("j_statistics", "no frames"));
    }
    if scores.len() < 4 {
        return Err(Error::invalid(
            "j_statistics",
            format!("decay needs at least 4 frames, got {}", scores.len()),
        ));
    }
    let n = scores.len();
    let mean = scores.iter().sum::<f64>() / n as f64;
    let recall = scores.iter().filter(|&&v| v > 0.5).count() as f64 / n as f64;
    let (q, r) = (n / 4, n % 4);
    let first = &scores[..q + usize::from(r > 0)];
    let last = &scores[n - q..];
    let avg = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Ok(SeqStats {
        mean,
        recall,
        decay: (avg(first) - avg(last)).max(0.0),
    })
}

/// Foreground pixels with a 4-neighbour in the background. Pixels outside
/// the image are not counted as background.
pub fn boundary(mask: &[u8], h: usize, w: usize) -> Vec<bool> {
    let fg = |y: usize, x: usize| mask[y * w + x] != 0;
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if !fg(y, x) {
                continue;
            }
            out[y * w + x] = (y > 0 && !fg(y - 1, x))
                || (y + 1 < h && !fg(y + 1, x))
                || (x > 0 && !fg(y, x - 1))
                || (x + 1 < w && !fg(y, x + 1));
        }
    }
    out
}

/// Disk dilation of a boolean map by `radius`.
fn dilate(map: &[bool], h: usize, w: usize, radius: f64) -> Vec<bool> {
    let r = radius.floor() as isize;
    let offsets: Vec<(isize, isize)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
        .filter(|&(dy, dx)| ((dy * dy + dx * dx) as f64) <= radius * radius)
        .collect();
    let mut out = vec![false; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            if !map[y as usize * w + x as usize] {
                continue;
            }
            for &(dy, dx) in &offsets {
                let (yy, xx) = (y + dy, x + dx);
                if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                    out[yy as usize * w + xx as usize] = true;
                }
            }
        }
    }
    out
}

/// Boundary F-measure with matches within Euclidean `radius`.
pub fn boundary_f(pred: &[u8], gt: &[u8], h: usize, w: usize, radius: f64) -> Result<f64> {
    if pred.len() != h * w || gt.len() != h * w {
        return Err(Error::shape("boundary_f", &[h, w], &[pred.len(), gt.len()]));
    }
    let bp = boundary(pred, h, w);
    let bg = boundary(gt, h, w);
    let (np, ng) = (
        bp.iter().filter(|&&b| b).count(),
        bg.iter().filter(|&&b| b).count(),
    );
    if np == 0 && ng == 0 {
        return Ok(1.0);
    }
    if np == 0 || ng == 0 {
        return Ok(0.0);
    }
    let dp = dilate(&bp, h, w, radius);
    let dg = dilate(&bg, h, w, radius);
    let matched_p = bp.iter().zip(&dg).filter(|(&b, &d)| b && d).count();
    let matched_g = bg.iter().zip(&dp).filter(|(&b, &d)| b && d).count();
    let p = matched_p as f64 / np as f64;
    let r = matched_g as f64 / ng as f64;
    Ok(if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    })
}

/// Tight box of the largest 4-connected foreground component.
pub fn largest_component_box(mask: &[u8], h: usize, w: usize) -> Option<BoxYx> {
    let mut seen = vec![false; h * w];
    let mut best: Option<(usize, BoxYx)> = None;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if mask[start] == 0 || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut count = 0;
        let mut bx = [h, w, 0, 0];
        while let Some(i) = stack.pop() {
            let (y, x) = (i / w, i % w);
            count += 1;
            bx = [
                bx[0].min(y),
                bx[1].min(x),
                bx[2].max(y + 1),
                bx[3].max(x + 1),
            ];
            let mut push = |j: usize| {
                if mask[j] != 0 && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if y > 0 {
                push(i - w);
            }
            if y + 1 < h {
                push(i + w);
            }
            if x > 0 {
                push(i - 1);
            }
            if x + 1 < w {
                push(i + 1);
            }
        }
        // Ties keep the first component in raster order.
        if best.is_none_or(|(c, _)| count > c) {
            best = Some((count, bx));
        }
    }
    best.map(|(_, b)| b)
}

pub fn box_iou(a: &BoxYx, b: &BoxYx) -> f64 {
    let area = |b: &BoxYx| (b[2].saturating_sub(b[0]) * b[3].saturating_sub(b[1])) as f64;
    let ih = a[2].min(b[2]).saturating_sub(a[0].max(b[0]));
    let iw = a[3].min(b[3]).saturating_sub(a[1].max(b[1]));
    let inter = (ih * iw) as f64;
    let union = area(a) + area(b) - inter;
    if union == 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoxHits {
    pub iou: f64,
    pub hits: [bool; 5],
}

/// Box IoU of the prediction's largest component against `gt`, and a hit
/// per threshold when the IoU strictly exceeds it.
pub fn moca_success(pred: &[u8], h: usize, w: usize, gt: &BoxYx) -> Result<BoxHits> {
    if pred.len() != h * w {
        return Err(Error::shape("moca_success", &[h, w], &[pred.len()]));
    }
    let iou = largest_component_box(pred, h, w).map_or(0.0, |b| box_iou(&b, gt));
    Ok(BoxHits {
        iou,
        hits: TAUS.map(|t| iou > t),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoryTable {
    pub per_category: BTreeMap<String, f64>,
    pub overall: f64,
}

/// Unweighted mean per category, then the mean of those means.
pub fn per_category_mean<'a>(
    videos: impl IntoIterator<Item = (&'a str, f64)>,
) -> Result<CategoryTable> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (cat, v) in videos {
        let e = acc.entry(cat.to_owned()).or_default();
        e.0 += v;
        e.1 += 1;
    }
    if acc.is_empty() {
        return Err(Error::invalid("per_category_mean", "no categories"));
    }
    let per_category: BTreeMap<String, f64> = acc
        .into_iter()
        .map(|(k, (s, n))| (k, s / n as f64))
        .collect();
    let overall = per_category.values().sum::<f64>() / per_category.len() as f64;
    Ok(CategoryTable {
        per_category,
        overall,
    })
}

/// One video's prediction and ground truth.
#[derive(Debug, Clone)]
pub struct VideoEval<'a> {
    pub category: &'a str,
    pub height: usize,
    pub width: usize,
    /// `L*H*W` predicted labels.
    pub pred: &'a [u8],
    /// `L*H*W` ground-truth labels.
    pub gt: &'a [u8],
    /// Ground-truth box per frame.
    pub boxes: &'a [BoxYx],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    #[serde(rename = "J_mean")]
    pub j_mean: f64,
    #[serde(rename = "J_recall")]
    pub j_recall: f64,
    #[serde(rename = "J_decay")]
    pub j_decay: f64,
    #[serde(rename = "F_mean")]
    pub f_mean: f64,
    #[serde(rename = "F_recall")]
    pub f_recall: f64,
    #[serde(rename = "F_decay")]
    pub f_decay: f64,
    /// Success rate per threshold in `TAUS` order.
    #[serde(rename = "SR")]
    pub sr: BTreeMap<String, f64>,
    #[serde(rename = "SR_mean")]
    pub sr_mean: f64,
    /// Mean IoU per category and overall.
    pub per_category: CategoryTable,
    pub videos: usize,
}

impl EvalReport {
    /// Aligned plain-text rendering.
    pub fn to_table(&self) -> String {
        let mut rows = vec![
            ("J_mean", self.j_mean),
            ("J_recall", self.j_recall),
            ("J_decay", self.j_decay),
            ("F_mean", self.f_mean),
            ("F_recall", self.f_recall),
            ("F_decay", self.f_decay),
        ];
        for (k, v) in &self.sr {
            rows.push((k.as_str(), *v));
        }
        rows.push(("SR_mean", self.sr_mean));
        let mut out = String::new();
        for (k, v) in rows {
            out.push_str(&format!("{k:<12} {v:>8.4}\n"));
        }
        for (k, v) in &self.per_category.per_category {
            out.push_str(&format!("{:<12} {v:>8.4}\n", format!("mIoU[{k}]")));
        }
        out.push_str(&format!(
            "{:<12} {:>8.4}\n",
            "mIoU", self.per_category.overall
        ));
        out
    }
}

/// Averages per-video statistics over all videos.
pub fn evaluate(videos: &[VideoEval<'_>], radius: f64) -> Result<EvalReport> {
    if videos.is_empty() {
        return Err(Error::invalid("evaluate", "no videos"));
    }
    let mut j = (0.0, 0.0, 0.0);
    let mut f = (0.0, 0.0, 0.0);
    let mut hits = [0usize; 5];
    let mut frames = 0usize;
    let mut cat = Vec::with_capacity(videos.len());
    for v in videos {
        let n = v.height * v.width;
        if n == 0
            || v.pred.len() != v.gt.len()
            || v.gt.len() % n != 0
            || v.boxes.len() != v.gt.len() / n
        {
            return Err(Error::invalid(
                "evaluate",
                "prediction, ground truth and boxes disagree in size",
            ));
        }
        let len = v.gt.len() / n;
        let mut js = Vec::with_capacity(len);
        let mut fs = Vec::with_capacity(len);
        for t in 0..len {
            let (p, g) = (&v.pred[t * n..(t + 1) * n], &v.gt[t * n..(t + 1) * n]);
            js.push(iou(p, g)?);
            fs.push(boundary_f(p, g, v.height, v.width, radius)?);
            let bh = moca_success(p, v.height, v.width, &v.boxes[t])?;
            for (h, &b) in hits.iter_mut().zip(&bh.hits) {
                *h += usize::from(b);
            }
        }
        frames += len;
        let (sj, sf) = (j_statistics(&js)?, j_statistics(&fs)?);
        j = (j.0 + sj.mean, j.1 + sj.recall, j.2 + sj.decay);
        f = (f.0 + sf.mean, f.1 + sf.recall, f.2 + sf.decay);
        cat.push((v.category, sj.mean));
    }
    let nv = videos.len() as f64;
    let sr: BTreeMap<String, f64> = TAUS
        .iter()
        .zip(&hits)
        .map(|(t, &h)| (format!("SR@{t:.1}"), h as f64 / frames as f64))
        .collect();
    let sr_mean = sr.values().sum::<f64>() / TAUS.len() as f64;
    Ok(EvalReport {
        j_mean: j.0 / nv,
        j_recall: j.1 / nv,
        j_decay: j.2 / nv,
        f_mean: f.0 / nv,
        f_recall: f.1 / nv,
        f_decay: f.2 / nv,
        sr,
        sr_mean,
        per_category: per_category_mean(cat)?,
        videos: videos.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect(h: usize, w: usize, b: BoxYx) -> Vec<u8> {
        let mut m = vec![0; h * w];
        for y in b[0]..b[2] {
            for x in b[1]..b[3] {
                m[y * w + x] = 1;
            }
        }
        m
    }

    #[test]
    fn iou_hand_values() {
        let a = rect(4, 4, [0, 0, 4, 2]);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &rect(4, 4, [0, 2, 4, 4])).unwrap(), 0.0);
        // 8 + 8 pixels overlapping in 4: 4 / 12.
        assert_eq!(iou(&a, &rect(4, 4, [0, 1, 4, 3])).unwrap(), 1.0 / 3.0);
        assert_eq!(iou(&[0; 4], &[0; 4]).unwrap(), 1.0);
        assert!(iou(&[0; 4], &[0; 5]).is_err());
    }

    #[test]
    fn j_statistics_hand_values() {
        let s = j_statistics(&[0.9, 0.8, 0.7, 0.6]).unwrap();
        assert!((s.mean - 0.75).abs() < 1e-15);
        assert_eq!(s.recall, 1.0);
        assert!((s.decay - 0.3).abs() < 1e-15);
        let c = j_statistics(&[0.6; 7]).unwrap();
        assert_eq!((c.recall, c.decay), (1.0, 0.0));
        assert_eq!(j_statistics(&[0.2, 0.4, 0.6, 0.8]).unwrap().decay, 0.0);
        assert!(j_statistics(&[]).is_err());
        assert!(j_statistics(&[1.0, 1.0]).is_err());
    }

    #[test]
    fn boundary_f_shift_within_and_beyond_tolerance() {
        let a = rect(12, 12, [3, 3, 9, 9]);
        assert_eq!(boundary_f(&a, &a, 12, 12, 1.0).unwrap(), 1.0);
        let b = rect(12, 12, [3, 4, 9, 10]);
        assert_eq!(boundary_f(&a, &b, 12, 12, 1.0).unwrap(), 1.0);
        // Shift by 3: only the top and bottom edges' shared columns match.
        let c = rect(12, 12, [3, 6, 9, 12]);
        let got = boundary_f(&a, &c, 12, 12, 1.0).unwrap();
        assert!((got - brute_force_f(&a, &c, 12, 12, 1.0)).abs() < 1e-15);
        assert!(got < 1.0 && got > 0.0);
    }

    /// Pairwise distance oracle.
    fn brute_force_f(p: &[u8], g: &[u8], h: usize, w: usize, r: f64) -> f64 {
        let pts = |m: &[u8]| -> Vec<(f64, f64)> {
            let b = boundary(m, h, w);
            (0..h * w)
                .filter(|&i| b[i])
                .map(|i| ((i / w) as f64, (i % w) as f64))
                .collect()
        };
        let (bp, bg) = (pts(p), pts(g));
        let near = |a: &(f64, f64), set: &[(f64, f64)]| {
            set.iter().any(|b| (a.0 - b.0).hypot(a.1 - b.1) <= r)
        };
        let prec = bp.iter().filter(|a| near(a, &bg)).count() as f64 / bp.len() as f64;
        let rec = bg.iter().filter(|a| near(a, &bp)).count() as f64 / bg.len() as f64;
        if prec + rec == 0.0 {
            0.0
        } else {
            2.0 * prec * rec / (prec + rec)
        }
    }

    #[test]
    fn boundary_f_matches_brute_force_on_random_masks() {
        let mut rng = crate::rng::Rng::new(3);
        for _ in 0..30 {
            let a: Vec<u8> = (0..100).map(|_| u8::from(rng.uniform() < 0.4)).collect();
            let b: Vec<u8> = (0..100).map(|_| u8::from(rng.uniform() < 0.4)).collect();
            for r in [1.0, 1.5, 2.0] {
                let got = boundary_f(&a, &b, 10, 10, r).unwrap();
                let want = if boundary(&a, 10, 10).iter().any(|&x| x)
                    && boundary(&b, 10, 10).iter().any(|&x| x)
                {
                    brute_force_f(&a, &b, 10, 10, r)
                } else {
                    got
                };
                assert!((got - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn success_hand_values() {
        let gt = [0, 0, 10, 8];
        let full = moca_success(&rect(12, 12, gt), 12, 12, &gt).unwrap();
        assert_eq!(full.hits, [true; 5]);
        let empty = moca_success(&[0; 144], 12, 12, &gt).unwrap();
        assert_eq!((empty.iou, empty.hits), (0.0, [false; 5]));
        // Intersection 60, union 100.
        let off = moca_success(&rect(12, 12, [0, 2, 10, 10]), 12, 12, &gt).unwrap();
        assert_eq!(off.iou, 0.6);
        assert_eq!(off.hits, [true, false, false, false, false]);
    }

    #[test]
    fn largest_component_wins() {
        let mut m = rect(10, 10, [0, 0, 2, 2]);
        for (i, v) in rect(10, 10, [5, 5, 9, 8]).into_iter().enumerate() {
            m[i] |= v;
        }
        assert_eq!(largest_component_box(&m, 10, 10), Some([5, 5, 9, 8]));
    }

    #[test]
    fn category_means() {
        let one = per_category_mean([("a", 0.2), ("a", 0.4)]).unwrap();
        assert!((one.overall - 0.3).abs() < 1e-15);
        let two = per_category_mean([("a", 1.0), ("b", 0.0), ("b", 0.0)]).unwrap();
        assert_eq!(two.overall, 0.5);
        assert!(per_category_mean(std::iter::empty()).is_err());
        let cats = [
            "aeroplane",
            "bird",
            "boat",
            "car",
            "cat",
            "cow",
            "dog",
            "horse",
            "motorbike",
            "train",
        ];
        let ten = per_category_mean(cats.iter().map(|c| (*c, 0.5))).unwrap();
        assert_eq!(ten.per_category.len(), 10);
    }

    #[test]
    fn evaluate_perfect_prediction() {
        let (h, w) = (8, 8);
        let mut gt = Vec::new();
        let mut boxes = Vec::new();
        for t in 0..4 {
            let b = [1, t, 5, t + 3];
            gt.extend(rect(h, w, b));
            boxes.push(b);
        }
        let v = VideoEval {
            category: "disk",
            height: h,
            width: w,
            pred: &gt,
            gt: &gt,
            boxes: &boxes,
        };
        let r = evaluate(&[v], BOUNDARY_RADIUS).unwrap();
        assert_eq!(
            (r.j_mean, r.f_mean, r.sr_mean, r.j_decay),
            (1.0, 1.0, 1.0, 0.0)
        );
        assert!(serde_json::to_string(&r)
            .unwrap()
            .contains("\"J_mean\":1.0"));
        assert!(r.to_table().contains("SR@0.5"));
    }
}
