//! Falling objects under constant gravity with an elastic floor.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::render::{Canvas, Shape};
use super::{grid_uniform, stack_frames, FrameAnnotation, ObjectState, TaskSpec, VideoClip};
use crate::error::{Error, Result};
use crate::rng::{named_seed, rng};

/// Initial state and appearance of one simulated object.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FallingObject {
    pub shape: Shape,
    pub radius: f64,
    pub intensity: f64,
    pub position: [f64; 2],
    pub velocity: [f64; 2],
}

fn random_sign<R: Rng>(r: &mut R) -> f64 {
    if r.gen::<bool>() {
        1.0
    } else {
        -1.0
    }
}

/// Draws 1 to `spec.objects` objects and a target, then simulates.
pub fn falling_clip(spec: &TaskSpec, seed: u64) -> Result<VideoClip> {
    let mut r = rng(named_seed(seed, "objects"));
    let s = spec.canvas as f64;
    let count = r.gen_range(1..=spec.objects.max(1));
    let objects: Vec<FallingObject> = (0..count)
        .map(|_| {
            let radius = [2.0, 2.5, 3.0][r.gen_range(0..3)];
            let shape = if r.gen() { Shape::Circle } else { Shape::Square };
            let intensity = grid_uniform(&mut r, 0.35, 0.7);
            let position = [grid_uniform(&mut r, radius, s - radius), grid_uniform(&mut r, radius, 0.6 * s)];
            let velocity = [
                random_sign(&mut r) * grid_uniform(&mut r, spec.speed.0, spec.speed.1),
                random_sign(&mut r) * grid_uniform(&mut r, spec.speed.0, spec.speed.1),
            ];
            FallingObject {
                shape,
                radius,
                intensity,
                position,
                velocity,
            }
        })
        .collect();
    let target = r.gen_range(0..count);
    simulate_falling(spec, &objects, target, seed)
}

/// Integrates `objects` for `spec.clip_frames` frames and renders them,
/// boxing object `target` in every frame.
///
/// Each step is `p ← p + v`, then `v ← v + (0, g)`; a crossing of the floor
/// or a side wall reflects the position and the matching velocity component.
/// There is no ceiling: an object thrown upward may leave the view.
pub fn simulate_falling(spec: &TaskSpec, objects: &[FallingObject], target: usize, seed: u64) -> Result<VideoClip> {
    let s = spec.canvas as f64;
    if target >= objects.len() {
        return Err(Error::Spec(format!("target {target} out of {} objects", objects.len())));
    }
    if let Some(o) = objects.iter().find(|o| 2.0 * o.radius + 2.0 > s || o.radius <= 0.0) {
        return Err(Error::Spec(format!("object of radius {} cannot fit a {s}px canvas", o.radius)));
    }
    let mut states: Vec<ObjectState> = objects
        .iter()
        .map(|o| ObjectState {
            position: o.position,
            velocity: o.velocity,
            in_view: in_view(o.position, s),
            bounced: false,
        })
        .collect();
    let mut canvases = Vec::with_capacity(spec.clip_frames);
    let mut annotations = Vec::with_capacity(spec.clip_frames);
    for k in 0..spec.clip_frames {
        if k > 0 {
            for (st, o) in states.iter_mut().zip(objects) {
                *st = advance(*st, o.radius, spec.gravity, s);
            }
        }
        let mut c = Canvas::new(spec.canvas, 0.0);
        for (st, o) in states.iter().zip(objects) {
            c.draw(o.shape, st.position[0], st.position[1], o.radius, o.intensity);
        }
        let (t, rt) = (states[target].position, objects[target].radius + 1.0);
        c.outline(t[0] - rt, t[1] - rt, t[0] + rt, t[1] + rt, 1.0);
        canvases.push(c);
        annotations.push(FrameAnnotation { objects: states.clone() });
    }
    Ok(VideoClip {
        frames: stack_frames(&canvases, spec.channels, spec.noise, named_seed(seed, "noise"))?,
        annotations,
        label: None,
        target_object: Some(target),
        seed,
    })
}

fn in_view(p: [f64; 2], s: f64) -> bool {
    (0.0..s).contains(&p[0]) && (0.0..s).contains(&p[1])
}

fn advance(st: ObjectState, radius: f64, gravity: f64, s: f64) -> ObjectState {
    let mut p = [st.position[0] + st.velocity[0], st.position[1] + st.velocity[1]];
    let mut v = [st.velocity[0], st.velocity[1] + gravity];
    let mut bounced = false;
    let (lo, hi) = (radius, s - radius);
    if p[1] > hi {
        p[1] = 2.0 * hi - p[1];
        v[1] = -v[1];
        bounced = true;
    }
    if p[0] < lo {
        p[0] = 2.0 * lo - p[0];
        v[0] = -v[0];
        bounced = true;
    } else if p[0] > hi {
        p[0] = 2.0 * hi - p[0];
        v[0] = -v[0];
        bounced = true;
    }
    ObjectState {
        position: p,
        velocity: v,
        in_view: in_view(p, s),
        bounced,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn object(position: [f64; 2], velocity: [f64; 2]) -> FallingObject {
        FallingObject {
            shape: Shape::Circle,
            radius: 2.0,
            intensity: 0.5,
            position,
            velocity,
        }
    }

    #[test]
    fn static_limit() {
        let mut spec = TaskSpec::falling(0);
        spec.gravity = 0.0;
        let clip = simulate_falling(&spec, &[object([10.0, 12.0], [0.0, 0.0])], 0, 3).unwrap();
        for k in 1..clip.len() {
            assert_eq!(clip.frame(k), clip.frame(0));
            assert_eq!(clip.annotations[k], clip.annotations[0]);
        }
    }

    #[test]
    fn linear_motion() {
        let mut spec = TaskSpec::falling(0);
        spec.gravity = 0.0;
        let clip = simulate_falling(&spec, &[object([5.0, 12.0], [1.0, 0.0])], 0, 3).unwrap();
        for (k, a) in clip.annotations.iter().enumerate() {
            assert_eq!(a.objects[0].position, [5.0 + k as f64, 12.0]);
        }
    }

    #[test]
    fn floor_bounce_is_flagged_and_reflects() {
        let spec = TaskSpec::falling(0);
        let clip = simulate_falling(&spec, &[object([16.0, 28.0], [0.0, 1.5])], 0, 0).unwrap();
        let b = clip.annotations.iter().position(|a| a.objects[0].bounced).unwrap();
        let st = clip.annotations[b].objects[0];
        assert!(st.velocity[1] < 0.0);
        assert!(st.position[1] <= 30.0);
    }

    #[test]
    fn oversized_object_is_rejected() {
        let mut spec = TaskSpec::falling(0);
        spec.canvas = 8;
        let mut o = object([4.0, 4.0], [0.0, 0.0]);
        o.radius = 3.5;
        assert!(matches!(simulate_falling(&spec, &[o], 0, 0), Err(Error::Spec(_))));
    }

    #[test]
    fn target_is_boxed() {
        let mut spec = TaskSpec::falling(0);
        spec.gravity = 0.0;
        let clip = simulate_falling(&spec, &[object([10.0, 10.0], [0.0, 0.0])], 0, 0).unwrap();
        assert_eq!(clip.frame(0)[7 * 32 + 7], 1.0);
        assert_eq!(clip.frame(0)[7 * 32 + 12], 1.0);
    }
}
