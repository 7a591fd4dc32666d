//! Deterministic synthetic video tasks and their input pipelines.
//!
//! Three generators mirror three temporal characters: falling objects whose
//! future state must be regressed, an object translating in one of four
//! directions (undecidable from any single frame), and a static class shape
//! that any single frame reveals. Every clip is a pure function of the task
//! spec and a per-clip seed derived from `(spec.seed, index)`.

mod direction;
mod falling;
mod pipeline;
pub mod render;
mod sample;
mod still;

pub use direction::{direction_clip, Direction};
pub use falling::{falling_clip, FallingObject};
pub use pipeline::{Batch, Example, Pipeline, Split, TargetKind, View, MAX_CROPS};
pub use sample::{k_crop_offsets, SamplingScheme};
pub use still::{static_clip, static_oracle, STATIC_CLASSES};

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::split_seed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    FallingObject,
    Direction,
    Static,
}

impl TaskKind {
    pub fn classes(self) -> Option<usize> {
        match self {
            TaskKind::FallingObject => None,
            TaskKind::Direction => Some(4),
            TaskKind::Static => Some(STATIC_CLASSES),
        }
    }
}

fn default_channels() -> usize {
    1
}

/// Everything needed to generate and sample clips for one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub task: TaskKind,
    /// Frames shown to the model.
    pub n_frames: usize,
    /// Largest regression distance past the last shown frame.
    #[serde(default)]
    pub future_distance: usize,
    /// Frames generated per clip.
    pub clip_frames: usize,
    /// Side of the generated square canvas in pixels.
    pub canvas: usize,
    /// Side of the model input after cropping; defaults to the canvas size.
    #[serde(default)]
    pub crop: Option<usize>,
    #[serde(default = "default_channels")]
    pub channels: usize,
    /// Upper bound on moving objects (falling task) or distractors (static task).
    #[serde(default)]
    pub objects: usize,
    /// Static background blobs (direction task).
    #[serde(default)]
    pub clutter: usize,
    /// Downward acceleration in pixels per frame².
    #[serde(default)]
    pub gravity: f64,
    /// Speed range in pixels per frame.
    pub speed: (f64, f64),
    /// Standard deviation of additive pixel noise.
    #[serde(default)]
    pub noise: f64,
    pub sampling: SamplingScheme,
    /// Random horizontal flip during training (label-mapped on the direction task).
    #[serde(default)]
    pub hflip: bool,
    /// Shuffle frames during training as well as in shuffled evaluation.
    #[serde(default)]
    pub train_shuffle: bool,
    #[serde(default)]
    pub seed: u64,
}

impl TaskSpec {
    /// Falling objects on a 32px canvas: 8 shown frames, targets up to 4 frames ahead.
    pub fn falling(seed: u64) -> Self {
        Self {
            task: TaskKind::FallingObject,
            n_frames: 8,
            future_distance: 4,
            clip_frames: 16,
            canvas: 32,
            crop: None,
            channels: 1,
            objects: 3,
            clutter: 0,
            gravity: 0.125,
            speed: (0.0, 1.5),
            noise: 0.0,
            sampling: SamplingScheme::Movi,
            hflip: false,
            train_shuffle: false,
            seed,
        }
    }

    /// One object crossing a cluttered 32px canvas; 16 frames, 8 sampled by bins.
    pub fn direction(seed: u64) -> Self {
        Self {
            task: TaskKind::Direction,
            n_frames: 8,
            future_distance: 0,
            clip_frames: 16,
            canvas: 32,
            crop: None,
            channels: 1,
            objects: 0,
            clutter: 6,
            gravity: 0.0,
            speed: (0.75, 1.25),
            noise: 0.05,
            sampling: SamplingScheme::Bin,
            hflip: true,
            train_shuffle: false,
            seed,
        }
    }

    /// A class shape wandering over a 36px canvas, randomly cropped to 32px.
    pub fn still(seed: u64) -> Self {
        Self {
            task: TaskKind::Static,
            n_frames: 8,
            future_distance: 0,
            clip_frames: 64,
            canvas: 36,
            crop: Some(32),
            channels: 1,
            objects: 2,
            clutter: 0,
            gravity: 0.0,
            speed: (0.0, 0.5),
            noise: 0.0,
            sampling: SamplingScheme::Stride(8),
            hflip: true,
            train_shuffle: false,
            seed,
        }
    }

    pub fn input_size(&self) -> usize {
        self.crop.unwrap_or(self.canvas)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Spec(m));
        if self.n_frames == 0 {
            return bad("n_frames must be at least 1".into());
        }
        if self.channels == 0 {
            return bad("channels must be positive".into());
        }
        if self.canvas < 8 {
            return bad(format!("canvas {} is too small (minimum 8)", self.canvas));
        }
        if let Some(c) = self.crop {
            if c == 0 || c > self.canvas {
                return Err(Error::Geometry(format!("crop {c} larger than canvas {}", self.canvas)));
            }
        }
        let (lo, hi) = self.speed;
        if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
            return bad(format!("invalid speed range {:?}", self.speed));
        }
        if self.noise < 0.0 || !self.gravity.is_finite() {
            return bad("noise must be non-negative and gravity finite".into());
        }
        let needed = self.sampling.frames_needed(self.n_frames)
            + if self.task == TaskKind::FallingObject { self.future_distance } else { 0 };
        if self.clip_frames < needed {
            return Err(Error::Length {
                needed,
                available: self.clip_frames,
            });
        }
        match self.task {
            TaskKind::FallingObject if self.objects == 0 => bad("falling task needs at least one object".into()),
            TaskKind::Direction => direction::check_geometry(self),
            TaskKind::Static => still::check_geometry(self),
            _ => Ok(()),
        }
    }

    /// Seed of clip `index`.
    pub fn clip_seed(&self, index: u64) -> u64 {
        split_seed(self.seed, index)
    }

    /// Generates clip `index`.
    pub fn generate(&self, index: u64) -> Result<VideoClip> {
        self.generate_seeded(self.clip_seed(index))
    }

    /// Generates the clip with per-clip seed `seed`.
    pub fn generate_seeded(&self, seed: u64) -> Result<VideoClip> {
        self.validate()?;
        match self.task {
            TaskKind::FallingObject => falling_clip(self, seed),
            TaskKind::Direction => direction_clip(self, seed, None),
            TaskKind::Static => static_clip(self, seed),
        }
    }
}

/// Simulator state of one object in one frame. Positions are pixel
/// coordinates of the object center; velocities are pixels per frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectState {
    pub position: [f64; 2],
    pub velocity: [f64; 2],
    pub in_view: bool,
    /// The step into this frame reflected off a wall or the floor.
    pub bounced: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameAnnotation {
    pub objects: Vec<ObjectState>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    /// `[frames, H, W, C]`, values in `[0, 1]`.
    pub frames: Tensor,
    pub annotations: Vec<FrameAnnotation>,
    pub label: Option<usize>,
    pub target_object: Option<usize>,
    pub seed: u64,
}

#[derive(Serialize)]
struct Sidecar<'a> {
    seed: u64,
    label: Option<usize>,
    target_object: Option<usize>,
    annotations: &'a [FrameAnnotation],
}

impl VideoClip {
    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn size(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.frames.shape()[3]
    }

    pub fn frame(&self, k: usize) -> &[f64] {
        let n = self.frames.numel() / self.len();
        &self.frames.data()[k * n..(k + 1) * n]
    }

    /// Keeps frames in the given order, with their annotations.
    pub fn select(&self, order: &[usize]) -> Result<VideoClip> {
        if let Some(&bad) = order.iter().find(|&&k| k >= self.len()) {
            return Err(Error::Length {
                needed: bad + 1,
                available: self.len(),
            });
        }
        if order.is_empty() {
            return Err(Error::Spec("cannot select zero frames".into()));
        }
        let mut data = Vec::with_capacity(order.len() * self.frame(0).len());
        for &k in order {
            data.extend_from_slice(self.frame(k));
        }
        let mut shape = self.frames.shape().to_vec();
        shape[0] = order.len();
        Ok(VideoClip {
            frames: Tensor::new(shape, data)?,
            annotations: order.iter().map(|&k| self.annotations[k].clone()).collect(),
            label: self.label,
            target_object: self.target_object,
            seed: self.seed,
        })
    }

    /// Writes `frame_XXX.pgm` per frame (first channel) and `clip.json`.
    pub fn dump(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let (s, c) = (self.size(), self.channels());
        for k in 0..self.len() {
            let mut bytes = format!("P5\n{s} {s}\n255\n").into_bytes();
            bytes.extend(
                self.frame(k)
                    .iter()
                    .step_by(c)
                    .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
            );
            fs::write(dir.join(format!("frame_{k:03}.pgm")), bytes)?;
        }
        let sidecar = Sidecar {
            seed: self.seed,
            label: self.label,
            target_object: self.target_object,
            annotations: &self.annotations,
        };
        fs::write(dir.join("clip.json"), serde_json::to_string_pretty(&sidecar)?)?;
        Ok(())
    }
}

/// Stacks grayscale canvases into a `[frames, H, W, C]` tensor, replicating
/// the gray value over channels, adding clipped Gaussian noise when `noise > 0`.
pub(crate) fn stack_frames(canvases: &[render::Canvas], channels: usize, noise: f64, seed: u64) -> Result<Tensor> {
    use rand_distr::{Distribution, Normal};
    let size = canvases[0].size;
    let mut rng = crate::rng::rng(seed);
    let normal = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).expect("finite std");
    let mut data = Vec::with_capacity(canvases.len() * size * size * channels);
    for c in canvases {
        for &v in &c.pixels {
            let v = if noise > 0.0 {
                (v + normal.sample(&mut rng)).clamp(0.0, 1.0)
            } else {
                v
            };
            data.extend(std::iter::repeat_n(v, channels));
        }
    }
    Tensor::new([canvases.len(), size, size, channels], data)
}

/// Uniform draw on the 1/16-pixel grid inside `[lo, hi]`, so simulated
/// positions and velocities stay exactly representable.
pub(crate) fn grid_uniform<R: rand::Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    let (a, b) = ((lo * 16.0).ceil() as i64, (hi * 16.0).floor() as i64);
    if b <= a {
        return a as f64 / 16.0;
    }
    rng.gen_range(a..=b) as f64 / 16.0
}
