//! A class shape visible in every frame, among dimmer moving distractors.
//!
//! The class object is drawn last at full intensity and pixel-aligned, so its
//! footprint is exact in every frame and no distractor can imitate it. Motion
//! of all objects is random and independent of the class.

use rand::Rng;

use super::render::{Canvas, Shape};
use super::{grid_uniform, stack_frames, FrameAnnotation, ObjectState, TaskSpec, VideoClip};
use crate::error::{Error, Result};
use crate::rng::{named_seed, rng};

/// Mirror-symmetric class shapes, so a horizontal flip keeps the label.
const CLASS_SHAPES: [Shape; 4] = [Shape::Square, Shape::Ring, Shape::Cross, Shape::Stripes];
pub const STATIC_CLASSES: usize = CLASS_SHAPES.len();
const CLASS_RADIUS: f64 = 4.5;
const CLASS_SIDE: usize = 9;

/// Range of class-object centers that stays whole inside every possible crop.
fn center_range(spec: &TaskSpec) -> (f64, f64) {
    let margin = (spec.canvas - spec.input_size()) as f64;
    (margin + CLASS_RADIUS, spec.input_size() as f64 - CLASS_RADIUS)
}

pub(super) fn check_geometry(spec: &TaskSpec) -> Result<()> {
    let (lo, hi) = center_range(spec);
    if lo > hi {
        return Err(Error::Spec(format!(
            "a {}px canvas cropped to {}px cannot keep a {CLASS_SIDE}px class shape in view",
            spec.canvas,
            spec.input_size()
        )));
    }
    Ok(())
}

struct Mover {
    state: ObjectState,
    lo: f64,
    hi: f64,
}

impl Mover {
    fn new<R: Rng>(r: &mut R, lo: f64, hi: f64, speed: (f64, f64)) -> Self {
        let mut v = || {
            let sign = if r.gen() { 1.0 } else { -1.0 };
            sign * grid_uniform(r, speed.0, speed.1)
        };
        let velocity = [v(), v()];
        let position = [grid_uniform(r, lo, hi), grid_uniform(r, lo, hi)];
        Self {
            state: ObjectState {
                position,
                velocity,
                in_view: true,
                bounced: false,
            },
            lo,
            hi,
        }
    }

    fn step(&mut self) {
        let st = &mut self.state;
        st.bounced = false;
        for a in 0..2 {
            let mut p = st.position[a] + st.velocity[a];
            if p < self.lo {
                p = 2.0 * self.lo - p;
                st.velocity[a] = -st.velocity[a];
                st.bounced = true;
            } else if p > self.hi {
                p = 2.0 * self.hi - p;
                st.velocity[a] = -st.velocity[a];
                st.bounced = true;
            }
            st.position[a] = p;
        }
    }
}

/// Pixel-aligned render center of a continuous position.
fn snap(p: f64) -> f64 {
    p.floor() + 0.5
}

pub fn static_clip(spec: &TaskSpec, seed: u64) -> Result<VideoClip> {
    check_geometry(spec)?;
    let label = rng(named_seed(seed, "label")).gen_range(0..STATIC_CLASSES);
    let mut g = rng(named_seed(seed, "geometry"));
    let s = spec.canvas as f64;
    let (lo, hi) = center_range(spec);
    let mut class = Mover::new(&mut g, lo, hi, spec.speed);
    let count = g.gen_range(0..=spec.objects);
    let mut distractors: Vec<(Mover, f64, f64)> = (0..count)
        .map(|_| {
            let r = grid_uniform(&mut g, 1.5, 3.0);
            let m = Mover::new(&mut g, r, s - r, spec.speed);
            (m, r, grid_uniform(&mut g, 0.3, 0.7))
        })
        .collect();

    let mut canvases = Vec::with_capacity(spec.clip_frames);
    let mut annotations = Vec::with_capacity(spec.clip_frames);
    for k in 0..spec.clip_frames {
        if k > 0 {
            class.step();
            distractors.iter_mut().for_each(|d| d.0.step());
        }
        let mut c = Canvas::new(spec.canvas, 0.0);
        for (m, r, v) in &distractors {
            c.draw(Shape::Circle, m.state.position[0], m.state.position[1], *r, *v);
        }
        let p = class.state.position;
        c.draw(CLASS_SHAPES[label], snap(p[0]), snap(p[1]), CLASS_RADIUS, 1.0);
        canvases.push(c);
        let mut objects = vec![class.state];
        objects.extend(distractors.iter().map(|d| d.0.state));
        annotations.push(FrameAnnotation { objects });
    }
    Ok(VideoClip {
        frames: stack_frames(&canvases, spec.channels, spec.noise, named_seed(seed, "noise"))?,
        annotations,
        label: Some(label),
        target_object: Some(0),
        seed,
    })
}

/// Footprints of the class shapes as offsets inside a 9×9 window.
fn templates() -> Vec<Vec<(usize, usize)>> {
    CLASS_SHAPES
        .iter()
        .map(|&shape| {
            let mut c = Canvas::new(CLASS_SIDE, 0.0);
            c.draw(shape, CLASS_RADIUS, CLASS_RADIUS, CLASS_RADIUS, 1.0);
            (0..CLASS_SIDE * CLASS_SIDE)
                .filter(|&i| c.pixels[i] == 1.0)
                .map(|i| (i % CLASS_SIDE, i / CLASS_SIDE))
                .collect()
        })
        .collect()
}

/// Reads the class off a single noise-free `[H, W, C]` frame: the largest
/// class footprint found entirely at full intensity anywhere in the frame.
pub fn static_oracle(frame: &[f64], size: usize, channels: usize) -> Option<usize> {
    if size < CLASS_SIDE || frame.len() != size * size * channels {
        return None;
    }
    let at = |x: usize, y: usize| frame[(y * size + x) * channels];
    let mut best: Option<(usize, usize)> = None;
    for (class, mask) in templates().iter().enumerate() {
        let found = (0..=size - CLASS_SIDE).any(|y0| {
            (0..=size - CLASS_SIDE).any(|x0| mask.iter().all(|&(dx, dy)| at(x0 + dx, y0 + dy) == 1.0))
        });
        if found && best.is_none_or(|(_, n)| mask.len() > n) {
            best = Some((class, mask.len()));
        }
    }
    best.map(|(c, _)| c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn templates_are_distinct() {
        let t = templates();
        let sizes: Vec<usize> = t.iter().map(Vec::len).collect();
        assert_eq!(sizes[0], 81);
        assert_eq!(sizes[1], 32);
        assert!(t.iter().enumerate().all(|(i, a)| t.iter().skip(i + 1).all(|b| a != b)));
    }

    #[test]
    fn oracle_reads_every_frame_of_every_class() {
        let spec = TaskSpec::still(7);
        let mut seen = [false; STATIC_CLASSES];
        for i in 0..40 {
            let clip = spec.generate(i).unwrap();
            let label = clip.label.unwrap();
            seen[label] = true;
            for k in 0..clip.len() {
                assert_eq!(static_oracle(clip.frame(k), clip.size(), 1), Some(label));
            }
        }
        assert!(seen.iter().all(|&b| b));
    }

    #[test]
    fn crop_that_cannot_hold_the_shape_is_rejected() {
        let spec = TaskSpec {
            canvas: 36,
            crop: Some(12),
            ..TaskSpec::still(0)
        };
        assert!(matches!(static_clip(&spec, 0), Err(Error::Spec(_))));
    }
}
