//! Deterministic synthetic clips with dense ground truth.
//!
//! A scene is one moving foreground object over a static textured
//! background, optionally with static unlabeled distractors. In camouflage
//! mode the object is cut from the same value-noise field as the background,
//! sampled at object-local coordinates so the texture travels with it, and
//! its first two moments are matched to the background of every frame. A
//! single frame then carries no appearance cue; only motion separates the
//! object.

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::trainer::Sample;
use crate::rng::{mix, Rng};
use crate::tensor::{read_mvt1, write_mvt1, DType, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Disk,
    Rectangle,
    Blob,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Disk, ShapeKind::Rectangle, ShapeKind::Blob];
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShapeKind::Disk => "disk",
            ShapeKind::Rectangle => "rectangle",
            ShapeKind::Blob => "blob",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Trajectory {
    Linear,
    Sinusoidal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextureMode {
    Contrast,
    Camouflage,
}

impl std::str::FromStr for TextureMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "contrast" => Ok(TextureMode::Contrast),
            "camouflage" => Ok(TextureMode::Camouflage),
            _ => Err(Error::Config(format!(
                "texture mode must be contrast or camouflage, got `{s}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub shape: ShapeKind,
    pub trajectory: Trajectory,
    /// Pixels per frame along `direction`.
    pub velocity: f64,
    /// Radians.
    pub direction: f64,
    /// Object centre at frame 0, `(y, x)` in pixels.
    pub start: (f64, f64),
    /// Object radius (half-extent for rectangles).
    pub size: f64,
    pub texture: TextureMode,
    pub distractors: usize,
}

/// Axis-aligned box `[y0, x0, y1, x1)`.
pub type BoxYx = [usize; 4];

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// `[T,H,W,3]` in `[0,1]`.
    pub clip: Tensor,
    /// `T*H*W` labels, 1 on the object.
    pub masks: Vec<u8>,
    /// Tight mask box per frame.
    pub boxes: Vec<BoxYx>,
}

impl Scene {
    pub fn frame_mask(&self, t: usize) -> &[u8] {
        let n = self.clip.dim(1) * self.clip.dim(2);
        &self.masks[t * n..(t + 1) * n]
    }

    pub fn to_sample(&self) -> Sample {
        Sample {
            clip: self.clip.clone(),
            labels: self.masks.iter().map(|&m| m as usize).collect(),
        }
    }
}

/// Lattice spacing of the value noise, in pixels.
const NOISE_CELL: f64 = 4.0;
const SINE_AMPLITUDE: f64 = 3.0;
const SINE_PERIOD: f64 = 6.0;

/// Seeded value noise over the whole plane, in `[0,1]`.
#[derive(Debug, Clone, Copy)]
struct ValueNoise {
    seed: u64,
}

impl ValueNoise {
    fn lattice(&self, ix: i64, iy: i64) -> f64 {
        let h = mix(mix(self.seed, ix as u64), iy as u64);
        (h >> 11) as f64 / (1u64 << 53) as f64
    }

    fn at(&self, y: f64, x: f64) -> f64 {
        let (gy, gx) = (y / NOISE_CELL, x / NOISE_CELL);
        let (y0, x0) = (gy.floor(), gx.floor());
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        let (ty, tx) = (smooth(gy - y0), smooth(gx - x0));
        let (iy, ix) = (y0 as i64, x0 as i64);
        let a = self.lattice(ix, iy);
        let b = self.lattice(ix + 1, iy);
        let c = self.lattice(ix, iy + 1);
        let d = self.lattice(ix + 1, iy + 1);
        let top = a + (b - a) * tx;
        let bot = c + (d - c) * tx;
        top + (bot - top) * ty
    }
}

#[derive(Debug, Clone, Copy)]
struct Shape {
    kind: ShapeKind,
    size: f64,
    /// Blob lobes' phase.
    phase: f64,
}

impl Shape {
    /// Whether local offset `(dy, dx)` from the centre is inside.
    fn contains(&self, dy: f64, dx: f64) -> bool {
        match self.kind {
            ShapeKind::Disk => dy * dy + dx * dx <= self.size * self.size,
            ShapeKind::Rectangle => dy.abs() <= self.size * 0.75 && dx.abs() <= self.size,
            ShapeKind::Blob => {
                let r = (dy * dy + dx * dx).sqrt();
                let th = dy.atan2(dx);
                r <= self.size * (1.0 + 0.2 * (3.0 * th + self.phase).sin()) / 1.2
            }
        }
    }

    /// Half-extent bound `(y, x)` of the footprint.
    fn extent(&self) -> (f64, f64) {
        match self.kind {
            ShapeKind::Rectangle => (self.size * 0.75, self.size),
            _ => (self.size, self.size),
        }
    }
}

impl SceneSpec {
    pub fn center(&self, t: usize) -> (f64, f64) {
        let s = self.velocity * t as f64;
        let (sy, sx) = (self.direction.sin(), self.direction.cos());
        let mut c = (self.start.0 + s * sy, self.start.1 + s * sx);
        if self.trajectory == Trajectory::Sinusoidal {
            let off = SINE_AMPLITUDE * (2.0 * std::f64::consts::PI * t as f64 / SINE_PERIOD).sin();
            c.0 += off * sx;
            c.1 -= off * sy;
        }
        c
    }

    fn shape(&self) -> Shape {
        Shape {
            kind: self.shape,
            size: self.size,
            phase: Rng::new(self.seed)
                .fork(3)
                .range(0.0, std::f64::consts::TAU),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config(
                "scene needs at least one frame and a non-empty grid".into(),
            ));
        }
        if self.height % 32 != 0 || self.width % 32 != 0 {
            return Err(Error::Config(format!(
                "scene size {}x{} must be multiples of 32",
                self.height, self.width
            )));
        }
        if !(self.size > 0.0) || !self.velocity.is_finite() {
            return Err(Error::Config(
                "object size must be positive and velocity finite".into(),
            ));
        }
        let (ey, ex) = self.shape().extent();
        for t in 0..self.frames {
            let (cy, cx) = self.center(t);
            if cy - ey < 0.0
                || cx - ex < 0.0
                || cy + ey > self.height as f64
                || cx + ex > self.width as f64
            {
                return Err(Error::Config(format!(
                    "object leaves the {}x{} frame at t={t} (centre {cy:.1},{cx:.1})",
                    self.height, self.width
                )));
            }
        }
        Ok(())
    }

    /// A random valid scene for `seed`.
    pub fn random(seed: u64, opts: &GenOptions) -> Result<Self> {
        let mut rng = Rng::new(seed);
        let scale = opts.height.min(opts.width) as f64 / 64.0;
        for _ in 0..64 {
            let shape = ShapeKind::ALL[rng.below(3)];
            let trajectory = if rng.uniform() < 0.5 {
                Trajectory::Linear
            } else {
                Trajectory::Sinusoidal
            };
            let mut spec = SceneSpec {
                seed,
                frames: opts.frames,
                height: opts.height,
                width: opts.width,
                shape,
                trajectory,
                velocity: rng.range(opts.velocity.0, opts.velocity.1),
                direction: rng.range(0.0, std::f64::consts::TAU),
                start: (0.0, 0.0),
                size: rng.range(8.0, 13.0) * scale,
                texture: opts.texture,
                distractors: opts.distractors,
            };
            // Place the path's bounding box uniformly inside the frame.
            let (ey, ex) = spec.shape().extent();
            let pts: Vec<(f64, f64)> = (0..spec.frames).map(|t| spec.center(t)).collect();
            let lo = pts
                .iter()
                .fold((f64::MAX, f64::MAX), |a, p| (a.0.min(p.0), a.1.min(p.1)));
            let hi = pts
                .iter()
                .fold((f64::MIN, f64::MIN), |a, p| (a.0.max(p.0), a.1.max(p.1)));
            let free_y = opts.height as f64 - 2.0 * ey - (hi.0 - lo.0);
            let free_x = opts.width as f64 - 2.0 * ex - (hi.1 - lo.1);
            if free_y <= 1.0 || free_x <= 1.0 {
                continue;
            }
            spec.start = (
                ey - lo.0 + 0.5 + rng.range(0.0, free_y - 1.0),
                ex - lo.1 + 0.5 + rng.range(0.0, free_x - 1.0),
            );
            if spec.validate().is_ok() {
                return Ok(spec);
            }
        }
        Err(Error::Config(format!(
            "no valid scene fits {}x{} over {} frames",
            opts.height, opts.width, opts.frames
        )))
    }
}

fn moments(v: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut n, mut s, mut s2) = (0.0, 0.0, 0.0);
    for x in v {
        n += 1.0;
        s += x;
        s2 += x * x;
    }
    if n == 0.0 {
        return (0.0, 0.0);
    }
    let m = s / n;
    (m, (s2 / n - m * m).max(0.0))
}

/// Quantizes to multiples of 1/256, which f32 storage represents exactly.
fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 256.0).round().min(255.0) / 256.0
}

/// Renders a scene. Pure function of `spec`.
pub fn generate(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let (t_n, h, w) = (spec.frames, spec.height, spec.width);
    let root = Rng::new(spec.seed);
    let field = ValueNoise {
        seed: mix(spec.seed, 0xf1e1d),
    };
    // Contrast mode draws the object from its own field with a shifted range.
    let own = ValueNoise {
        seed: mix(spec.seed, 0x0b1ec7),
    };
    let tint = {
        let mut r = root.fork(1);
        [r.range(0.8, 1.0), r.range(0.8, 1.0), r.range(0.8, 1.0)]
    };
    let obj_tint = [tint[2], tint[0] * 0.6, tint[1]];
    let shape = spec.shape();
    // The object's texture origin is fixed so the pattern rides along.
    let tex_origin = {
        let mut r = root.fork(2);
        (r.range(200.0, 400.0), r.range(200.0, 400.0))
    };
    let distractors: Vec<((f64, f64), Shape, (f64, f64))> = {
        let mut r = root.fork(4);
        (0..spec.distractors)
            .map(|_| {
                let s = Shape {
                    kind: ShapeKind::ALL[r.below(3)],
                    size: r.range(3.0, 6.0),
                    phase: r.range(0.0, std::f64::consts::TAU),
                };
                let (ey, ex) = s.extent();
                let c = (r.range(ey, h as f64 - ey), r.range(ex, w as f64 - ex));
                (c, s, (r.range(500.0, 700.0), r.range(500.0, 700.0)))
            })
            .collect()
    };

    let bg_value = |y: f64, x: f64| 0.15 + 0.7 * field.at(y, x);
    let mut data = vec![0.0; t_n * h * w * 3];
    let mut masks = vec![0u8; t_n * h * w];
    let mut boxes = Vec::with_capacity(t_n);
    for t in 0..t_n {
        let (cy, cx) = spec.center(t);
        let mut v = vec![0.0; h * w];
        let mut is_obj = vec![false; h * w];
        let mut is_distractor = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
                let i = y * w + x;
                v[i] = bg_value(py, px);
                for &((dy, dx), s, (oy, ox)) in &distractors {
                    if s.contains(py - dy, px - dx) {
                        is_distractor[i] = true;
                        v[i] = match spec.texture {
                            TextureMode::Camouflage => bg_value(py - dy + oy, px - dx + ox),
                            TextureMode::Contrast => 0.5 + 0.4 * own.at(py - dy + oy, px - dx + ox),
                        };
                    }
                }
                if shape.contains(py - cy, px - cx) {
                    is_obj[i] = true;
                    is_distractor[i] = false;
                    let (ly, lx) = (py - cy + tex_origin.0, px - cx + tex_origin.1);
                    v[i] = match spec.texture {
                        TextureMode::Camouflage => bg_value(ly, lx),
                        TextureMode::Contrast => 0.55 + 0.4 * own.at(ly, lx),
                    };
                }
            }
        }
        if spec.texture == TextureMode::Camouflage {
            let (mb, vb) = moments((0..h * w).filter(|&i| !is_obj[i]).map(|i| v[i]));
            let (mf, vf) = moments((0..h * w).filter(|&i| is_obj[i]).map(|i| v[i]));
            let a = if vf > 0.0 { (vb / vf).sqrt() } else { 1.0 };
            for i in (0..h * w).filter(|&i| is_obj[i]) {
                v[i] = mb + a * (v[i] - mf);
            }
        }
        let (mut y0, mut x0, mut y1, mut x1) = (h, w, 0, 0);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let tint_px = if is_obj[i] && spec.texture == TextureMode::Contrast {
                    &obj_tint
                } else {
                    &tint
                };
                let base = ((t * h + y) * w + x) * 3;
                for c in 0..3 {
                    data[base + c] = quantize(v[i] * tint_px[c]);
                }
                if is_obj[i] {
                    masks[t * h * w + i] = 1;
                    y0 = y0.min(y);
                    x0 = x0.min(x);
                    y1 = y1.max(y + 1);
                    x1 = x1.max(x + 1);
                }
            }
        }
        boxes.push([y0, x0, y1, x1]);
    }
    Ok(Scene {
        clip: Tensor::from_vec(&[t_n, h, w, 3], data)?,
        masks,
        boxes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenOptions {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub texture: TextureMode,
    /// Speed range in pixels per frame.
    pub velocity: (f64, f64),
    pub distractors: usize,
}

impl Default for GenOptions {
    fn default() -> Self {
        GenOptions {
            frames: 8,
            height: 64,
            width: 64,
            texture: TextureMode::Camouflage,
            velocity: (1.5, 3.0),
            distractors: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// Disjoint seed streams for the two splits.
pub fn split_seed(seed: u64, split: Split, index: usize) -> u64 {
    let lane = match split {
        Split::Train => 1,
        Split::Val => 2,
    };
    mix(mix(seed, lane), index as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub category: ShapeKind,
    pub spec: SceneSpec,
    pub boxes: Vec<BoxYx>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub options: GenOptions,
    pub clips: Vec<ManifestEntry>,
}

/// In-memory split without touching disk; identical to what
/// [`make_dataset`] writes.
pub fn generate_split(
    n: usize,
    seed: u64,
    split: Split,
    opts: &GenOptions,
) -> Result<Vec<(SceneSpec, Scene)>> {
    (0..n)
        .map(|i| {
            let spec = SceneSpec::random(split_seed(seed, split, i), opts)?;
            let scene = generate(&spec)?;
            Ok((spec, scene))
        })
        .collect()
}

/// Writes `clips/NNN.mvt1`, `masks/NNN_f.pgm` and `manifest.json` under
/// `dir`. Training clips come first, then validation clips.
pub fn make_dataset(
    dir: &Path,
    n_train: usize,
    n_val: usize,
    seed: u64,
    opts: &GenOptions,
) -> Result<Manifest> {
    fs::create_dir_all(dir.join("clips"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let mut clips = Vec::with_capacity(n_train + n_val);
    for (split, n) in [(Split::Train, n_train), (Split::Val, n_val)] {
        for (spec, scene) in generate_split(n, seed, split, opts)? {
            let id = format!("{:03}", clips.len());
            write_mvt1(
                dir.join("clips").join(format!("{id}.mvt1")),
                &scene.clip,
                DType::F32,
            )?;
            let (h, w) = (spec.height, spec.width);
            for t in 0..spec.frames {
                write_pgm(
                    &dir.join("masks").join(format!("{id}_{t}.pgm")),
                    w,
                    h,
                    scene.frame_mask(t),
                )?;
            }
            clips.push(ManifestEntry {
                id,
                split,
                category: spec.shape,
                boxes: scene.boxes.clone(),
                spec,
            });
        }
    }
    let manifest = Manifest {
        seed,
        options: opts.clone(),
        clips,
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    Ok(manifest)
}

/// One loaded clip from a dataset directory.
#[derive(Debug, Clone)]
pub struct LoadedClip {
    pub entry: ManifestEntry,
    pub scene: Scene,
}

pub fn load_dataset(dir: &Path) -> Result<(Manifest, Vec<LoadedClip>)> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let mut out = Vec::with_capacity(manifest.clips.len());
    for e in &manifest.clips {
        let (clip, _) = read_mvt1(dir.join("clips").join(format!("{}.mvt1", e.id)))?;
        let t = clip.dim(0);
        let mut masks = Vec::with_capacity(clip.len() / 3);
        for f in 0..t {
            let (w, h, m) = read_pgm(&dir.join("masks").join(format!("{}_{f}.pgm", e.id)))?;
            if (h, w) != (clip.dim(1), clip.dim(2)) {
                return Err(Error::Format(format!(
                    "mask {}_{f} is {w}x{h}, clip is {:?}",
                    e.id,
                    clip.shape()
                )));
            }
            masks.extend(m);
        }
        out.push(LoadedClip {
            entry: e.clone(),
            scene: Scene {
                clip,
                masks,
                boxes: e.boxes.clone(),
            },
        });
    }
    Ok((manifest, out))
}

/// Binary 8-bit PGM (`P5`, maxval 255).
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::invalid(
            "pgm",
            format!("{} pixels for {width}x{height}", pixels.len()),
        ));
    }
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    write!(f, "P5\n{width} {height}\n255\n")?;
    f.write_all(pixels)?;
    f.flush()?;
    Ok(())
}

/// Reads a `P5` PGM with maxval ≤ 255 as `(width, height, pixels)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let bad = |what: &str| Error::Format(format!("{}: {what}", path.display()));
    if token()? != "P5" {
        return Err(bad("not a binary PGM"));
    }
    let w: usize = token()?.parse().map_err(|_| bad("bad width"))?;
    let h: usize = token()?.parse().map_err(|_| bad("bad height"))?;
    let maxval: usize = token()?.parse().map_err(|_| bad("bad maxval"))?;
    if maxval == 0 || maxval > 255 {
        return Err(bad("maxval must be 1..=255"));
    }
    let start = pos + 1;
    if bytes.len() < start + w * h {
        return Err(bad("truncated pixel data"));
    }
    Ok((w, h, bytes[start..start + w * h].to_vec()))
}

/// Paths of a dataset directory.
pub fn clip_path(dir: &Path, id: &str) -> PathBuf {
    dir.join("clips").join(format!("{id}.mvt1"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(texture: TextureMode, velocity: f64) -> SceneSpec {
        SceneSpec {
            seed: 9,
            frames: 4,
            height: 64,
            width: 64,
            shape: ShapeKind::Disk,
            trajectory: Trajectory::Linear,
            velocity,
            direction: 0.3,
            start: (30.0, 25.0),
            size: 10.0,
            texture,
            distractors: 2,
        }
    }

    #[test]
    fn static_contrast_scene_repeats_frames() {
        let s = generate(&spec(TextureMode::Contrast, 0.0)).unwrap();
        let per = 64 * 64 * 3;
        let d = s.clip.data();
        for t in 1..4 {
            assert_eq!(&d[..per], &d[t * per..(t + 1) * per]);
            assert_eq!(s.frame_mask(0), s.frame_mask(t));
        }
    }

    #[test]
    fn rigid_disk_keeps_its_area_when_shifted_by_whole_pixels() {
        let mut sp = spec(TextureMode::Camouflage, 3.0);
        sp.direction = 0.0;
        let s = generate(&sp).unwrap();
        let area = |t: usize| s.frame_mask(t).iter().filter(|&&m| m == 1).count();
        for t in 1..4 {
            assert_eq!(area(t), area(0));
        }
    }

    #[test]
    fn camouflage_frame_statistics_match() {
        for seed in 0..10 {
            let sp = SceneSpec::random(
                seed,
                &GenOptions {
                    distractors: 0,
                    ..GenOptions::default()
                },
            )
            .unwrap();
            let s = generate(&sp).unwrap();
            let n = 64 * 64;
            for t in [0, sp.frames - 1] {
                let px = &s.clip.data()[t * n * 3..(t + 1) * n * 3];
                let m = s.frame_mask(t);
                for c in 0..3 {
                    let stats = |want: u8| {
                        let v: Vec<f64> = (0..n)
                            .filter(|&i| m[i] == want)
                            .map(|i| px[i * 3 + c])
                            .collect();
                        let mean = v.iter().sum::<f64>() / v.len() as f64;
                        let var =
                            v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
                        (mean, var)
                    };
                    let (mf, vf) = stats(1);
                    let (mb, vb) = stats(0);
                    assert!(
                        (mf - mb).abs() <= 0.02 * mb,
                        "seed {seed} mean {mf} vs {mb}"
                    );
                    assert!((vf - vb).abs() <= 0.02 * vb, "seed {seed} var {vf} vs {vb}");
                }
            }
        }
    }

    #[test]
    fn leaving_the_frame_is_an_error() {
        let mut sp = spec(TextureMode::Contrast, 20.0);
        sp.direction = 0.0;
        assert!(generate(&sp).is_err());
        let mut sp = spec(TextureMode::Contrast, 0.0);
        sp.height = 48;
        assert!(generate(&sp).is_err());
    }

    #[test]
    fn boxes_are_tight() {
        let s = generate(&spec(TextureMode::Contrast, 2.0)).unwrap();
        for t in 0..4 {
            let [y0, x0, y1, x1] = s.boxes[t];
            let m = s.frame_mask(t);
            let inside = |y: usize, x: usize| m[y * 64 + x] == 1;
            assert!((x0..x1).any(|x| inside(y0, x)) && (x0..x1).any(|x| inside(y1 - 1, x)));
            assert!((y0..y1).any(|y| inside(y, x0)) && (y0..y1).any(|y| inside(y, x1 - 1)));
            let count = m.iter().filter(|&&v| v == 1).count();
            let in_box = (y0..y1)
                .flat_map(|y| (x0..x1).map(move |x| (y, x)))
                .filter(|&(y, x)| inside(y, x))
                .count();
            assert_eq!(count, in_box);
        }
    }

    #[test]
    fn generation_is_pure() {
        let sp = spec(TextureMode::Camouflage, 2.0);
        assert_eq!(generate(&sp).unwrap(), generate(&sp).unwrap());
    }

    #[test]
    fn dataset_round_trip_and_determinism() {
        let opts = GenOptions {
            frames: 3,
            ..GenOptions::default()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = make_dataset(a.path(), 2, 1, 7, &opts).unwrap();
        make_dataset(b.path(), 2, 1, 7, &opts).unwrap();
        for rel in [
            "manifest.json",
            "clips/000.mvt1",
            "clips/002.mvt1",
            "masks/001_2.pgm",
        ] {
            assert_eq!(
                fs::read(a.path().join(rel)).unwrap(),
                fs::read(b.path().join(rel)).unwrap(),
                "{rel}"
            );
        }
        assert_eq!(ma.clips.iter().filter(|c| c.split == Split::Val).count(), 1);
        let (_, loaded) = load_dataset(a.path()).unwrap();
        let fresh = generate_split(2, 7, Split::Train, &opts).unwrap();
        assert_eq!(loaded[0].scene, fresh[0].1);
        let empty = tempfile::tempdir().unwrap();
        assert!(make_dataset(empty.path(), 0, 0, 1, &opts)
            .unwrap()
            .clips
            .is_empty());
    }

    #[test]
    fn split_seeds_are_disjoint() {
        let train: std::collections::HashSet<u64> =
            (0..100).map(|i| split_seed(3, Split::Train, i)).collect();
        assert!((0..100).all(|i| !train.contains(&split_seed(3, Split::Val, i))));
    }

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        let px: Vec<u8> = (0..12).collect();
        write_pgm(&p, 4, 3, &px).unwrap();
        assert_eq!(read_pgm(&p).unwrap(), (4, 3, px));
        assert!(write_pgm(&p, 4, 4, &[0; 3]).is_err());
    }

    /// Histogram classifier on pixel intensity, fit on frame 0 and scored
    /// by balanced accuracy on the last frame.
    fn appearance_only_accuracy(scene: &Scene, frames: usize) -> f64 {
        const BINS: usize = 16;
        let n = 64 * 64;
        let px = scene.clip.data();
        let bin = |t: usize, i: usize| ((px[(t * n + i) * 3] * BINS as f64) as usize).min(BINS - 1);
        let mut hist = [[0.0f64; BINS]; 2];
        let m0 = scene.frame_mask(0);
        let counts = [
            m0.iter().filter(|&&m| m == 0).count() as f64,
            m0.iter().filter(|&&m| m == 1).count() as f64,
        ];
        for i in 0..n {
            hist[m0[i] as usize][bin(0, i)] += 1.0 / counts[m0[i] as usize];
        }
        let t = frames - 1;
        let mt = scene.frame_mask(t);
        let mut correct = [0.0, 0.0];
        let mut total = [0.0, 0.0];
        for i in 0..n {
            let b = bin(t, i);
            let pred = usize::from(hist[1][b] > hist[0][b]);
            let y = mt[i] as usize;
            total[y] += 1.0;
            correct[y] += f64::from(u8::from(pred == y));
        }
        0.5 * (correct[0] / total[0] + correct[1] / total[1])
    }

    #[test]
    fn single_frames_carry_no_appearance_cue() {
        let opts = GenOptions::default();
        let scenes = generate_split(20, 5, Split::Train, &opts).unwrap();
        let acc: f64 = scenes
            .iter()
            .map(|(_, s)| appearance_only_accuracy(s, opts.frames))
            .sum::<f64>()
            / 20.0;
        assert!(acc < 0.6, "camouflage balanced accuracy {acc}");
        let contrast = GenOptions {
            texture: TextureMode::Contrast,
            ..opts.clone()
        };
        let scenes = generate_split(20, 5, Split::Train, &contrast).unwrap();
        let acc: f64 = scenes
            .iter()
            .map(|(_, s)| appearance_only_accuracy(s, opts.frames))
            .sum::<f64>()
            / 20.0;
        assert!(acc > 0.8, "contrast balanced accuracy {acc}");
    }
}
