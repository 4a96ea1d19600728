//! Procedural paired datasets.
//!
//! Scenes are 3–6 flat-colored rectangles and ellipses over a background.
//! Each task kind derives a condition image from the clean scene; the target
//! is the clean scene (or its negation for `invert`). All values are in
//! `[-1, 1]`, images are `[h, w, 3]`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::{rng_stream, Purpose};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TaskKind {
    /// Target is the channelwise negation of the condition.
    Invert,
    /// Condition is the binary boundary map of the scene.
    EdgeFill,
    /// Scene over a two-tone checkerboard background; condition is its
    /// grayscale luminance.
    CheckerColorize,
    /// Condition is a 5x5 box-blurred copy of the scene.
    BlurSharpen,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] =
        [TaskKind::Invert, TaskKind::EdgeFill, TaskKind::CheckerColorize, TaskKind::BlurSharpen];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Invert => "invert",
            TaskKind::EdgeFill => "edge_fill",
            TaskKind::CheckerColorize => "checker_colorize",
            TaskKind::BlurSharpen => "blur_sharpen",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            TaskKind::Invert => 0,
            TaskKind::EdgeFill => 1,
            TaskKind::CheckerColorize => 2,
            TaskKind::BlurSharpen => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.code() == code)
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown task kind {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub condition: Tensor,
    pub target: Tensor,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedDataset {
    pub name: String,
    pub kind: TaskKind,
    pub seed: u64,
    pub size: usize,
    pub pairs: Vec<Pair>,
}

impl PairedDataset {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.pairs.len()).filter(|&i| self.pairs[i].split == split).collect()
    }

    pub fn train_indices(&self) -> Vec<usize> {
        self.indices(Split::Train)
    }

    pub fn val_indices(&self) -> Vec<usize> {
        self.indices(Split::Val)
    }
}

pub const MIN_COUNT: usize = 10;

/// Number of held-out validation pairs for a dataset of `count` pairs.
pub fn val_count(count: usize) -> usize {
    (count / 10).max(1)
}

#[derive(Clone, Copy)]
enum Shape {
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64 },
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y < y1 && x >= x0 && x < x1,
            Shape::Ellipse { cy, cx, ry, rx } => {
                let dy = (y - cy) / ry;
                let dx = (x - cx) / rx;
                dy * dy + dx * dx <= 1.0
            }
        }
    }
}

/// Clean scene plus the per-pixel id of the topmost region (0 = background).
fn render_scene(kind: TaskKind, seed: u64, index: usize, size: usize) -> (Vec<f64>, Vec<u32>) {
    let mut s = rng_stream(seed, Purpose::Scene, &[kind.code() as u64, index as u64]);
    let color = |s: &mut crate::rng::Stream| -> [f64; 3] {
        [s.uniform_range(-1.0, 1.0), s.uniform_range(-1.0, 1.0), s.uniform_range(-1.0, 1.0)]
    };
    let bg = color(&mut s);
    let bg2 = color(&mut s);
    let checker = kind == TaskKind::CheckerColorize;
    let cell = 8;
    let mut img = Vec::with_capacity(size * size * 3);
    let mut ids = vec![0u32; size * size];
    for y in 0..size {
        for x in 0..size {
            let c = if checker && ((y / cell) + (x / cell)) % 2 == 1 { bg2 } else { bg };
            img.extend_from_slice(&c);
            if checker && ((y / cell) + (x / cell)) % 2 == 1 {
                ids[y * size + x] = 1;
            }
        }
    }
    let n_shapes = s.int_inclusive(3, 6);
    let sz = size as f64;
    for k in 0..n_shapes {
        let c = color(&mut s);
        let cy = s.uniform_range(0.0, sz);
        let cx = s.uniform_range(0.0, sz);
        let ry = s.uniform_range(0.1 * sz, 0.3 * sz);
        let rx = s.uniform_range(0.1 * sz, 0.3 * sz);
        let shape = if s.uniform() < 0.5 {
            Shape::Rect { y0: cy - ry, x0: cx - rx, y1: cy + ry, x1: cx + rx }
        } else {
            Shape::Ellipse { cy, cx, ry, rx }
        };
        for y in 0..size {
            for x in 0..size {
                if shape.contains(y as f64 + 0.5, x as f64 + 0.5) {
                    let p = (y * size + x) * 3;
                    img[p..p + 3].copy_from_slice(&c);
                    ids[y * size + x] = k as u32 + 2;
                }
            }
        }
    }
    (img, ids)
}

fn edge_map(ids: &[u32], size: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let id = ids[y * size + x];
            let differs = [(0i64, 1i64), (1, 0), (0, -1), (-1, 0)].iter().any(|&(dy, dx)| {
                let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                ny >= 0
                    && nx >= 0
                    && (ny as usize) < size
                    && (nx as usize) < size
                    && ids[ny as usize * size + nx as usize] != id
            });
            let v = if differs { 1.0 } else { -1.0 };
            out.extend_from_slice(&[v, v, v]);
        }
    }
    out
}

fn grayscale(img: &[f64]) -> Vec<f64> {
    img.chunks_exact(3)
        .flat_map(|p| {
            let l = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
            [l, l, l]
        })
        .collect()
}

fn box_blur(img: &[f64], size: usize, radius: usize) -> Vec<f64> {
    let r = radius as i64;
    let n = ((2 * r + 1) * (2 * r + 1)) as f64;
    let mut out = Vec::with_capacity(img.len());
    for y in 0..size as i64 {
        for x in 0..size as i64 {
            let mut acc = [0.0; 3];
            for dy in -r..=r {
                for dx in -r..=r {
                    let yy = (y + dy).clamp(0, size as i64 - 1) as usize;
                    let xx = (x + dx).clamp(0, size as i64 - 1) as usize;
                    let p = (yy * size + xx) * 3;
                    for c in 0..3 {
                        acc[c] += img[p + c];
                    }
                }
            }
            out.extend(acc.iter().map(|a| a / n));
        }
    }
    out
}

/// Generates `count` condition/target pairs of `kind`, 10% of them held out
/// for validation. Identical arguments give bitwise-identical datasets.
pub fn synth_task(kind: TaskKind, seed: u64, count: usize, size: usize) -> Result<PairedDataset> {
    if count < MIN_COUNT {
        return Err(Error::InvalidArgument(format!("count must be at least {MIN_COUNT}, got {count}")));
    }
    if size != 32 {
        return Err(Error::Unsupported(format!("image size {size} (only 32 is supported)")));
    }
    let n_val = val_count(count);
    let perm = rng_stream(seed, Purpose::Split, &[kind.code() as u64, count as u64]).permutation(count);
    let mut split = vec![Split::Train; count];
    for &i in &perm[..n_val] {
        split[i] = Split::Val;
    }
    let shape = [size, size, 3];
    let mut pairs = Vec::with_capacity(count);
    for (index, &sp) in split.iter().enumerate() {
        let (scene, ids) = render_scene(kind, seed, index, size);
        let (condition, target) = match kind {
            TaskKind::Invert => {
                let neg = scene.iter().map(|v| -v).collect();
                (scene, neg)
            }
            TaskKind::EdgeFill => (edge_map(&ids, size), scene),
            TaskKind::CheckerColorize => (grayscale(&scene), scene),
            TaskKind::BlurSharpen => (box_blur(&scene, size, 2), scene),
        };
        pairs.push(Pair {
            condition: Tensor::new(shape.to_vec(), condition)?,
            target: Tensor::new(shape.to_vec(), target)?,
            split: sp,
        });
    }
    Ok(PairedDataset { name: kind.name().to_string(), kind, seed, size, pairs })
}
