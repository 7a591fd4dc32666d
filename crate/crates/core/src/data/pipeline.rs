//! Turns generated clips into model batches.
//!
//! Training clips get a random crop, an optional label-safe flip and
//! optionally a frame shuffle; validation clips get a center crop (or one of
//! the fixed k-crops) and are shuffled only when asked. Train and validation
//! draw from disjoint clip-seed streams.

use rand::Rng;

use super::{k_crop_offsets, TaskKind, TaskSpec, VideoClip};
use crate::error::{Error, Result};
use crate::model::TARGET_WIDTH;
use crate::rng::{named_seed, rng};
use crate::tensor::Tensor;

/// Offset separating validation clip indices from training ones.
const VAL_OFFSET: u64 = 1 << 62;

/// Number of fixed crops available to [`View::Crop`].
pub const MAX_CROPS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetKind {
    /// Class label.
    Label,
    /// Target object's state in every shown frame, `[n, 6]`.
    Frames,
    /// Target object's state `t` frames after the last shown frame, `[6]`.
    Future(usize),
}

/// How a validation clip is presented.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum View {
    Plain,
    /// The `i`-th fixed crop: center, then the four corners.
    Crop(usize),
    /// Frames permuted by a fresh per-clip permutation derived from the seed.
    Shuffled(u64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[b, n, H, W, C]`.
    pub frames: Tensor,
    /// Class labels; empty for regression targets.
    pub labels: Vec<usize>,
    /// `[b, n, 6]` or `[b, 6]`; `None` for labels.
    pub targets: Option<Tensor>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One prepared example: `n` frames plus its target values.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub clip: VideoClip,
    pub label: Option<usize>,
    pub target: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Pipeline {
    spec: TaskSpec,
    split: Split,
}

impl Pipeline {
    pub fn new(spec: TaskSpec, split: Split) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec, split })
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn check_target(&self, target: TargetKind) -> Result<()> {
        let classification = self.spec.task != TaskKind::FallingObject;
        match target {
            TargetKind::Label if !classification => Err(Error::Spec("falling-object clips carry no label".into())),
            TargetKind::Frames | TargetKind::Future(_) if classification => {
                Err(Error::Spec(format!("{:?} clips carry no regression target", self.spec.task)))
            }
            TargetKind::Future(t) if t == 0 || t > self.spec.future_distance => Err(Error::Spec(format!(
                "future distance {t} outside 1..={}",
                self.spec.future_distance
            ))),
            _ => Ok(()),
        }
    }

    fn clip_seed(&self, index: u64) -> u64 {
        match self.split {
            Split::Train => self.spec.clip_seed(index),
            Split::Val => self.spec.clip_seed(VAL_OFFSET + index),
        }
    }

    /// Example `index` of this split under `view` (ignored for training).
    pub fn example(&self, index: u64, target: TargetKind, view: View) -> Result<Example> {
        self.check_target(target)?;
        let seed = self.clip_seed(index);
        let spec = &self.spec;
        let full = spec.generate_seeded(seed)?;
        let size = spec.input_size();
        let mut clip = match (self.split, view) {
            (Split::Train, _) => full.random_crop(size, named_seed(seed, "crop"))?,
            (Split::Val, View::Crop(i)) => {
                let offsets = k_crop_offsets(spec.canvas, size, MAX_CROPS)?;
                let &(x0, y0) = offsets
                    .get(i)
                    .ok_or_else(|| Error::Spec(format!("crop index {i} out of {MAX_CROPS}")))?;
                full.crop(x0, y0, size)?
            }
            (Split::Val, _) => full.center_crop(size)?,
        };
        if self.split == Split::Train && spec.hflip && rng(named_seed(seed, "flip")).gen::<bool>() {
            clip = clip.hflip(spec.task)?;
        }
        let horizon = match target {
            TargetKind::Future(t) => t,
            _ => 0,
        };
        let avail = clip.len() - horizon;
        let idx = spec.sampling.indices(avail, spec.n_frames, named_seed(seed, "sample"))?;
        let future = match target {
            TargetKind::Future(t) => Some(clip.annotations[idx[spec.n_frames - 1] + t].clone()),
            _ => None,
        };
        let mut shown = clip.select(&idx)?;
        let shuffle = match (self.split, view) {
            (Split::Train, _) if spec.train_shuffle => Some(named_seed(seed, "shuffle")),
            (Split::Val, View::Shuffled(s)) => Some(named_seed(s, &format!("clip{index}"))),
            _ => None,
        };
        if let Some(s) = shuffle {
            shown = shown.shuffle(s)?;
        }
        let object = shown.target_object.unwrap_or(0);
        let target_values = match target {
            TargetKind::Label => Vec::new(),
            TargetKind::Frames => shown
                .annotations
                .iter()
                .flat_map(|a| state_target(&a.objects[object], size))
                .collect(),
            TargetKind::Future(_) => state_target(&future.expect("set above").objects[object], size).to_vec(),
        };
        Ok(Example {
            label: shown.label,
            clip: shown,
            target: target_values,
        })
    }

    /// Stacks examples `indices` into one batch.
    pub fn batch(&self, indices: impl IntoIterator<Item = u64>, target: TargetKind, view: View) -> Result<Batch> {
        let mut frames = Vec::new();
        let mut labels = Vec::new();
        let mut targets = Vec::new();
        let mut count = 0;
        for i in indices {
            let ex = self.example(i, target, view)?;
            frames.extend_from_slice(ex.clip.frames.data());
            if target == TargetKind::Label {
                labels.push(ex.label.ok_or_else(|| Error::Spec("clip has no label".into()))?);
            }
            targets.extend(ex.target);
            count += 1;
        }
        if count == 0 {
            return Err(Error::Contract("empty batch".into()));
        }
        let (n, s, c) = (self.spec.n_frames, self.spec.input_size(), self.spec.channels);
        let targets = match target {
            TargetKind::Label => None,
            TargetKind::Frames => Some(Tensor::new([count, n, TARGET_WIDTH], targets)?),
            TargetKind::Future(_) => Some(Tensor::new([count, TARGET_WIDTH], targets)?),
        };
        Ok(Batch {
            frames: Tensor::new([count, n, s, s, c], frames)?,
            labels,
            targets,
        })
    }

    /// Training batch `step`: examples `step·size .. (step+1)·size`.
    pub fn train_batch(&self, step: u64, size: usize, target: TargetKind) -> Result<Batch> {
        let start = step * size as u64;
        self.batch(start..start + size as u64, target, View::Plain)
    }
}

/// Six regression values for one object: position mapped to `[-1, 1]` by
/// the view size, velocity in pixels per frame, zero third components.
fn state_target(o: &super::ObjectState, size: usize) -> [f64; TARGET_WIDTH] {
    let s = size as f64;
    [
        2.0 * o.position[0] / s - 1.0,
        2.0 * o.position[1] / s - 1.0,
        0.0,
        o.velocity[0],
        o.velocity[1],
        0.0,
    ]
}
