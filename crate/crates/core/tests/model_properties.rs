//! Whole-model contracts of the toy video ViT.

use patchblender::gradcheck::{check_model, DEFAULT_STEP};
use patchblender::model::ForwardOptions;
use patchblender::rng::trunc_normal;
use patchblender::{BlendVariant, HeadKind, ModelConfig, Tape, Tensor, VideoViT};

fn frames(cfg: &ModelConfig, batch: usize, seed: u64) -> Tensor {
    let shape = [batch, cfg.n_frames, cfg.image_size, cfg.image_size, cfg.channels];
    let mut t = trunc_normal(&shape, 0.5, seed);
    t.data_mut().iter_mut().for_each(|v| *v = v.abs() * 2.0);
    t
}

/// Moves every parameter well away from its initial value so that no gradient is trivially tiny.
fn scramble(model: &mut VideoViT, seed: u64) {
    for (k, (name, t)) in model.params_mut().into_iter().enumerate() {
        let noise = trunc_normal(t.shape(), 0.3, seed + k as u64);
        let base = if name.ends_with(".g") { 1.0 } else { 0.0 };
        for (v, n) in t.data_mut().iter_mut().zip(noise.data()) {
            *v = if name.starts_with("blend.") { *v + n } else { base + n };
        }
    }
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn identity_blend_equals_no_blend_bitwise() {
    let with = ModelConfig::toy(8, HeadKind::Classifier { classes: 4 });
    let mut without = with.clone();
    without.blend_layers.clear();
    let a = VideoViT::new(with.clone()).unwrap();
    let b = VideoViT::new(without).unwrap();
    for seed in 0..20 {
        let x = frames(&with, 2, seed);
        assert_eq!(bits(&a.predict(&x).unwrap()), bits(&b.predict(&x).unwrap()), "batch {seed}");
    }
}

fn permute_frames(x: &Tensor, order: &[usize]) -> Tensor {
    let s = x.shape();
    let frame = s[2] * s[3] * s[4];
    let mut out = Vec::with_capacity(x.numel());
    for b in 0..s[0] {
        for &f in order {
            let start = (b * s[1] + f) * frame;
            out.extend_from_slice(&x.data()[start..start + frame]);
        }
    }
    Tensor::new(s.to_vec(), out).unwrap()
}

#[test]
fn frame_order_only_matters_through_position_or_blend() {
    let mut cfg = ModelConfig::toy(4, HeadKind::Classifier { classes: 3 });
    cfg.embed_dim = 16;
    cfg.heads = 2;
    cfg.blend_layers.clear();
    let mut model = VideoViT::new(cfg.clone()).unwrap();
    model.pos = Tensor::zeros(model.pos.shape().to_vec());
    let x = frames(&cfg, 2, 3);
    let order = [2, 0, 3, 1];
    let y = model.predict(&x).unwrap();
    let yp = model.predict(&permute_frames(&x, &order)).unwrap();
    for (a, b) in y.data().iter().zip(yp.data()) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    cfg.blend_layers.insert(1);
    let mut blended = VideoViT::new(cfg).unwrap();
    blended.pos = Tensor::zeros(blended.pos.shape().to_vec());
    *blended.blend_matrix_mut(1).unwrap().ratios_mut() = trunc_normal(&[4, 4], 1.0, 8).with_requires_grad(true);
    let y = blended.predict(&x).unwrap();
    let yp = blended.predict(&permute_frames(&x, &order)).unwrap();
    let delta: f64 = y.data().iter().zip(yp.data()).map(|(a, b)| (a - b).abs()).sum();
    assert!(delta > 1e-9, "delta {delta}");
}

fn micro_gradcheck(head: HeadKind, variant: BlendVariant, faulty: bool) -> Vec<(String, f64)> {
    let mut cfg = ModelConfig::micro(head);
    cfg.blend_variant = variant;
    let mut model = VideoViT::new(cfg.clone()).unwrap();
    scramble(&mut model, 17);
    let x = frames(&cfg, 2, 4);
    let errs = check_model(&model, &x, DEFAULT_STEP, faulty, |tape, out| match head {
        HeadKind::Classifier { .. } => tape.cross_entropy(out, &[0, 2]),
        _ => {
            let target = trunc_normal(tape.shape(out), 1.0, 9);
            let target = tape.constant(target);
            tape.mse(out, target)
        }
    })
    .unwrap();
    errs.into_iter().map(|g| (g.name, g.max_rel_err)).collect()
}

#[test]
fn micro_model_gradients_match_finite_differences() {
    for head in [
        HeadKind::Classifier { classes: 3 },
        HeadKind::FrameRegressor,
        HeadKind::FutureRegressor,
    ] {
        for variant in BlendVariant::ALL {
            let errs = micro_gradcheck(head, variant, false);
            assert!(errs.iter().any(|(n, _)| n == "blend.R.layer1"));
            assert!(errs.iter().any(|(n, _)| n == "embed.patch.w"));
            for (name, e) in &errs {
                assert!(*e < 1e-4, "{head:?}/{variant:?} {name}: {e:e}");
            }
        }
    }
}

#[test]
fn corrupted_blend_backward_is_caught_on_r() {
    let errs = micro_gradcheck(HeadKind::FutureRegressor, BlendVariant::SameLocation, true);
    let failing: Vec<_> = errs.iter().filter(|(_, e)| *e >= 1e-4).map(|(n, _)| n.as_str()).collect();
    assert!(failing.contains(&"blend.R.layer1"), "{errs:?}");
}

#[test]
fn checkpoint_round_trip_reproduces_logits() {
    let cfg = ModelConfig::micro(HeadKind::Classifier { classes: 5 });
    let mut model = VideoViT::new(cfg.clone()).unwrap();
    scramble(&mut model, 3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    model.save(&path).unwrap();
    let back = VideoViT::load(&path, Some(&cfg)).unwrap();
    let x = frames(&cfg, 3, 1);
    assert_eq!(bits(&model.predict(&x).unwrap()), bits(&back.predict(&x).unwrap()));
}

#[test]
fn gradients_reach_parameters() {
    let cfg = ModelConfig::micro(HeadKind::FutureRegressor);
    let mut model = VideoViT::new(cfg.clone()).unwrap();
    let mut tape = Tape::new();
    let fwd = model.forward(&mut tape, &frames(&cfg, 2, 2), ForwardOptions::default()).unwrap();
    let loss = tape.mean(fwd.output);
    tape.backward(loss).unwrap();
    model.store_grads(&tape, &fwd).unwrap();
    for (name, t) in model.params() {
        assert!(t.grad().is_some(), "{name}");
    }
    assert!(model.head.fc2.b.grad().unwrap().iter().all(|&g| (g - 1.0 / 6.0).abs() < 1e-15));
}
