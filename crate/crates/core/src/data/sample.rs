//! Frame sampling schemes and clip transforms.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{TaskKind, VideoClip};
use crate::error::{Error, Result};
use crate::rng::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingScheme {
    /// Random start among the first four frames, then consecutive frames.
    Movi,
    /// Clip split into `n` equal bins, one random frame from each.
    Bin,
    /// Random start, then every `stride`-th frame.
    Stride(usize),
}

impl SamplingScheme {
    /// Shortest clip the scheme accepts for `n` frames.
    pub fn frames_needed(self, n: usize) -> usize {
        match self {
            SamplingScheme::Movi => n + 3,
            SamplingScheme::Bin => n,
            SamplingScheme::Stride(s) => (n - 1) * s.max(1) + 1,
        }
    }

    /// Indices of `n` frames from a clip of `len` frames.
    pub fn indices(self, len: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
        let needed = self.frames_needed(n);
        if len < needed || n == 0 {
            return Err(Error::Length { needed, available: len });
        }
        let mut r = rng(seed);
        Ok(match self {
            SamplingScheme::Movi => {
                let start = r.gen_range(0..=3);
                (start..start + n).collect()
            }
            SamplingScheme::Bin => (0..n)
                .map(|b| {
                    let (lo, hi) = (b * len / n, (b + 1) * len / n);
                    r.gen_range(lo..hi)
                })
                .collect(),
            SamplingScheme::Stride(s) => {
                let s = s.max(1);
                let start = r.gen_range(0..=len - needed);
                (0..n).map(|k| start + k * s).collect()
            }
        })
    }
}

impl VideoClip {
    /// Spatial window of side `size` at `(x0, y0)`, identical for every frame.
    pub fn crop(&self, x0: usize, y0: usize, size: usize) -> Result<VideoClip> {
        let s = self.size();
        if size == 0 || x0 + size > s || y0 + size > s {
            return Err(Error::Geometry(format!(
                "crop of {size}px at ({x0}, {y0}) does not fit a {s}px frame"
            )));
        }
        let c = self.channels();
        let mut data = Vec::with_capacity(self.len() * size * size * c);
        for k in 0..self.len() {
            let f = self.frame(k);
            for y in y0..y0 + size {
                data.extend_from_slice(&f[(y * s + x0) * c..(y * s + x0 + size) * c]);
            }
        }
        let mut out = self.clone();
        out.frames = Tensor::new([self.len(), size, size, c], data)?;
        for a in &mut out.annotations {
            for o in &mut a.objects {
                o.position[0] -= x0 as f64;
                o.position[1] -= y0 as f64;
                o.in_view = (0.0..size as f64).contains(&o.position[0]) && (0.0..size as f64).contains(&o.position[1]);
            }
        }
        Ok(out)
    }

    pub fn center_crop(&self, size: usize) -> Result<VideoClip> {
        let off = self.size().saturating_sub(size) / 2;
        self.crop(off, off, size)
    }

    /// The same random window for every frame.
    pub fn random_crop(&self, size: usize, seed: u64) -> Result<VideoClip> {
        if size > self.size() {
            return self.crop(0, 0, size);
        }
        let mut r = rng(seed);
        let span = self.size() - size;
        let (x0, y0) = (r.gen_range(0..=span), r.gen_range(0..=span));
        self.crop(x0, y0, size)
    }

    /// Mirrors every frame left to right. On the direction task the
    /// horizontal labels swap; vertical labels are unchanged.
    pub fn hflip(&self, task: TaskKind) -> Result<VideoClip> {
        let (s, c) = (self.size(), self.channels());
        let mut data = self.frames.data().to_vec();
        for row in data.chunks_exact_mut(s * c) {
            for x in 0..s / 2 {
                for ch in 0..c {
                    row.swap(x * c + ch, (s - 1 - x) * c + ch);
                }
            }
        }
        let mut out = self.clone();
        out.frames = Tensor::new(self.frames.shape().to_vec(), data)?;
        for a in &mut out.annotations {
            for o in &mut a.objects {
                o.position[0] = s as f64 - o.position[0];
                o.velocity[0] = -o.velocity[0];
            }
        }
        if task == TaskKind::Direction {
            out.label = self.label.map(|l| match l {
                0 => 1,
                1 => 0,
                other => other,
            });
        }
        Ok(out)
    }

    /// One uniform random permutation of the frame axis; annotations follow.
    pub fn shuffle(&self, seed: u64) -> Result<VideoClip> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut rng(seed));
        self.select(&order)
    }
}

/// Top-left corners of up to five fixed crops: center, then the four corners.
pub fn k_crop_offsets(canvas: usize, size: usize, k: usize) -> Result<Vec<(usize, usize)>> {
    if size > canvas {
        return Err(Error::Geometry(format!("crop {size} larger than frame {canvas}")));
    }
    if !(1..=5).contains(&k) {
        return Err(Error::Spec(format!("k-crop needs 1 to 5 crops, got {k}")));
    }
    let (m, e) = ((canvas - size) / 2, canvas - size);
    Ok([(m, m), (0, 0), (e, 0), (0, e), (e, e)][..k].to_vec())
}
