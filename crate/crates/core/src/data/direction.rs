//! One object translating in one of four directions over static clutter.
//!
//! The label is drawn from its own stream and the geometry from another, so
//! forcing a label keeps the scene and only changes the direction of travel.
//! Trajectories are symmetric about the clip's midpoint, which makes the time
//! reverse of a clip a valid clip of the opposite class.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::render::{Canvas, Shape};
use super::{grid_uniform, stack_frames, FrameAnnotation, ObjectState, TaskSpec, VideoClip};
use crate::error::{Error, Result};
use crate::rng::{named_seed, rng};

const OBJECT_RADIUS: (f64, f64) = (2.5, 3.5);
const CLUTTER_RADIUS: (f64, f64) = (1.5, 3.5);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    LeftToRight,
    RightToLeft,
    TopToBottom,
    BottomToTop,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::LeftToRight,
        Direction::RightToLeft,
        Direction::TopToBottom,
        Direction::BottomToTop,
    ];

    pub fn label(self) -> usize {
        self as usize
    }

    pub fn from_label(label: usize) -> Result<Self> {
        Self::ALL.get(label).copied().ok_or(Error::Label { label, classes: 4 })
    }

    fn unit(self) -> [f64; 2] {
        match self {
            Direction::LeftToRight => [1.0, 0.0],
            Direction::RightToLeft => [-1.0, 0.0],
            Direction::TopToBottom => [0.0, 1.0],
            Direction::BottomToTop => [0.0, -1.0],
        }
    }
}

fn travel(spec: &TaskSpec, speed: f64) -> f64 {
    speed * (spec.clip_frames as f64 - 1.0) / 2.0
}

pub(super) fn check_geometry(spec: &TaskSpec) -> Result<()> {
    let reach = OBJECT_RADIUS.1 + travel(spec, spec.speed.1);
    if 2.0 * reach + 1.0 > spec.input_size() as f64 {
        return Err(Error::Spec(format!(
            "a {}px view cannot hold a {}-frame trajectory at speed {}",
            spec.input_size(),
            spec.clip_frames,
            spec.speed.1
        )));
    }
    Ok(())
}

/// Generates a clip; `label` overrides the drawn direction.
pub fn direction_clip(spec: &TaskSpec, seed: u64, label: Option<Direction>) -> Result<VideoClip> {
    check_geometry(spec)?;
    let dir = match label {
        Some(d) => d,
        None => Direction::ALL[rng(named_seed(seed, "label")).gen_range(0..4)],
    };
    let mut g = rng(named_seed(seed, "geometry"));
    let s = spec.canvas as f64;
    // Keep the whole trajectory inside the central crop when one is used.
    let margin = ((spec.canvas - spec.input_size()) / 2) as f64;
    let (lo, hi) = (margin, s - margin);

    let shape = if g.gen() { Shape::Circle } else { Shape::Square };
    let radius = grid_uniform(&mut g, OBJECT_RADIUS.0, OBJECT_RADIUS.1);
    let intensity = grid_uniform(&mut g, 0.8, 1.0);
    let speed = grid_uniform(&mut g, spec.speed.0, spec.speed.1);
    let reach = radius + travel(spec, speed);
    let along = grid_uniform(&mut g, lo + reach, hi - reach);
    let across = grid_uniform(&mut g, lo + radius, hi - radius);
    let clutter: Vec<(Shape, f64, f64, f64, f64)> = (0..spec.clutter)
        .map(|_| {
            let shape = if g.gen() { Shape::Circle } else { Shape::Square };
            let r = grid_uniform(&mut g, CLUTTER_RADIUS.0, CLUTTER_RADIUS.1);
            (shape, grid_uniform(&mut g, 0.0, s), grid_uniform(&mut g, 0.0, s), r, grid_uniform(&mut g, 0.2, 0.8))
        })
        .collect();

    let mut background = Canvas::new(spec.canvas, 0.0);
    for &(shape, x, y, r, v) in &clutter {
        background.draw(shape, x, y, r, v);
    }
    let unit = dir.unit();
    let horizontal = unit[1] == 0.0;
    let half = (spec.clip_frames as f64 - 1.0) / 2.0;
    let mut canvases = Vec::with_capacity(spec.clip_frames);
    let mut annotations = Vec::with_capacity(spec.clip_frames);
    for k in 0..spec.clip_frames {
        let offset = speed * (k as f64 - half);
        let a = if horizontal { along + unit[0] * offset } else { along + unit[1] * offset };
        let position = if horizontal { [a, across] } else { [across, a] };
        let mut c = background.clone();
        c.draw(shape, position[0], position[1], radius, intensity);
        canvases.push(c);
        annotations.push(FrameAnnotation {
            objects: vec![ObjectState {
                position,
                velocity: [unit[0] * speed, unit[1] * speed],
                in_view: true,
                bounced: false,
            }],
        });
    }
    Ok(VideoClip {
        frames: stack_frames(&canvases, spec.channels, spec.noise, named_seed(seed, "noise"))?,
        annotations,
        label: Some(dir.label()),
        target_object: Some(0),
        seed,
    })
}
