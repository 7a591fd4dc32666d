//! Toy video Vision Transformer with optional PatchBlender layers.
//!
//! Frames are cut into non-overlapping patches, linearly embedded, prefixed
//! with a class token and summed with one learned positional table over the
//! whole `n·p + 1` sequence. Blocks use pre-normalization and joint
//! space-time attention. A block with a [`BlendMatrix`] blends the patch
//! tokens of its input right before attention; both residual branches add
//! back the unblended input.

mod checkpoint;
mod config;
mod flops;

pub use checkpoint::{BlendRecord, Checkpoint};
pub use config::{HeadKind, ModelConfig, TARGET_WIDTH};
pub use flops::{count_macs, MacReport, MAC_CONVENTION};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::blend::{self, BlendMatrix};
use crate::error::{Error, Result};
use crate::rng::{named_seed, trunc_normal, INIT_STD};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    fn init(inputs: usize, outputs: usize, seed: u64) -> Self {
        Self {
            w: trunc_normal(&[inputs, outputs], INIT_STD, seed).with_requires_grad(true),
            b: Tensor::zeros([outputs]).with_requires_grad(true),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Norm {
    pub g: Tensor,
    pub b: Tensor,
}

impl Norm {
    fn init(width: usize) -> Self {
        Self {
            g: Tensor::full([width], 1.0).with_requires_grad(true),
            b: Tensor::zeros([width]).with_requires_grad(true),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBlock {
    pub norm1: Norm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub blend: Option<BlendMatrix>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Per-call switches for [`VideoViT::forward`].
#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// Enables head dropout.
    pub training: bool,
    /// Seed of the dropout mask stream.
    pub dropout_seed: u64,
    /// Parameters are recorded as constants; nothing collects gradients.
    pub no_grad: bool,
    #[doc(hidden)]
    pub faulty_blend_grad: bool,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        Self {
            no_grad: true,
            ..Self::default()
        }
    }

    pub fn train(dropout_seed: u64) -> Self {
        Self {
            training: true,
            dropout_seed,
            ..Self::default()
        }
    }
}

/// Output variable plus the tape variable bound to each named parameter.
pub struct Forward {
    pub output: Var,
    pub bindings: Vec<(String, Var)>,
}

struct Binder {
    no_grad: bool,
    bindings: Vec<(String, Var)>,
}

impl Binder {
    fn bind(&mut self, tape: &mut Tape, name: String, t: &Tensor) -> Var {
        let v = if self.no_grad {
            tape.constant(t.clone())
        } else {
            tape.leaf(t.clone())
        };
        self.bindings.push((name, v));
        v
    }

    fn linear(&mut self, tape: &mut Tape, name: &str, l: &Linear, x: Var) -> Result<Var> {
        let w = self.bind(tape, format!("{name}.w"), &l.w);
        let b = self.bind(tape, format!("{name}.b"), &l.b);
        tape.linear(x, w, b)
    }

    fn norm(&mut self, tape: &mut Tape, name: &str, n: &Norm, x: Var) -> Result<Var> {
        let g = self.bind(tape, format!("{name}.g"), &n.g);
        let b = self.bind(tape, format!("{name}.b"), &n.b);
        tape.layernorm(x, g, b, LN_EPS)
    }
}

pub fn blend_param_name(layer: usize) -> String {
    format!("blend.R.layer{layer}")
}

/// Blend ratios are exempt from weight decay.
pub fn is_blend_param(name: &str) -> bool {
    name.starts_with("blend.")
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoViT {
    config: ModelConfig,
    pub patch: Linear,
    pub cls: Tensor,
    pub pos: Tensor,
    pub blocks: Vec<EncoderBlock>,
    pub norm: Norm,
    pub head: Head,
}

impl VideoViT {
    /// Initializes every parameter from a stream named after it, so models
    /// that differ only in their blend layers share all other weights.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let z = config.embed_dim;
        let hidden = z * config.mlp_ratio;
        let s = |name: &str| named_seed(seed, name);
        let mut blocks = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let blend = if config.blend_layers.contains(&i) {
                let map_seed = s(&format!("blend.map.layer{i}"));
                Some(BlendMatrix::new(
                    config.n_frames,
                    config.patches_per_frame(),
                    config.blend_variant,
                    map_seed,
                )?)
            } else {
                None
            };
            blocks.push(EncoderBlock {
                norm1: Norm::init(z),
                qkv: Linear::init(z, 3 * z, s(&format!("blocks.{i}.attn.qkv"))),
                proj: Linear::init(z, z, s(&format!("blocks.{i}.attn.proj"))),
                norm2: Norm::init(z),
                fc1: Linear::init(z, hidden, s(&format!("blocks.{i}.mlp.fc1"))),
                fc2: Linear::init(hidden, z, s(&format!("blocks.{i}.mlp.fc2"))),
                blend,
            });
        }
        let head = Self::init_head(&config, s("head"));
        Ok(Self {
            patch: Linear::init(config.patch_dim(), z, s("embed.patch")),
            cls: trunc_normal(&[1, z], INIT_STD, s("embed.cls")).with_requires_grad(true),
            pos: trunc_normal(&[config.tokens(), z], INIT_STD, s("embed.pos")).with_requires_grad(true),
            blocks,
            norm: Norm::init(z),
            head,
            config,
        })
    }

    fn init_head(config: &ModelConfig, seed: u64) -> Head {
        let out = config.head.outputs(config.n_frames);
        Head {
            fc1: Linear::init(config.embed_dim, config.head_hidden, named_seed(seed, "fc1")),
            fc2: Linear::init(config.head_hidden, out, named_seed(seed, "fc2")),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Swaps in a freshly initialized head of a different kind; encoder weights are kept.
    pub fn replace_head(&mut self, head: HeadKind, seed: u64) -> Result<()> {
        let mut config = self.config.clone();
        config.head = head;
        config.validate()?;
        self.head = Self::init_head(&config, seed);
        self.config = config;
        Ok(())
    }

    pub fn blend_matrices(&self) -> impl Iterator<Item = (usize, &BlendMatrix)> {
        self.blocks
            .iter()
            .enumerate()
            .filter_map(|(i, b)| b.blend.as_ref().map(|m| (i, m)))
    }

    pub fn blend_matrix_mut(&mut self, layer: usize) -> Option<&mut BlendMatrix> {
        self.blocks.get_mut(layer).and_then(|b| b.blend.as_mut())
    }

    /// Identity distance of every blend layer, in layer order.
    pub fn identity_distances(&self) -> Vec<(usize, f64)> {
        self.blend_matrices().map(|(i, m)| (i, m.identity_distance())).collect()
    }

    /// Every trainable tensor with its stable name.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("embed.patch.w".into(), &self.patch.w),
            ("embed.patch.b".into(), &self.patch.b),
            ("embed.cls".into(), &self.cls),
            ("embed.pos".into(), &self.pos),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let p = |s: &str| format!("blocks.{i}.{s}");
            out.extend([
                (p("norm1.g"), &b.norm1.g),
                (p("norm1.b"), &b.norm1.b),
                (p("attn.qkv.w"), &b.qkv.w),
                (p("attn.qkv.b"), &b.qkv.b),
                (p("attn.proj.w"), &b.proj.w),
                (p("attn.proj.b"), &b.proj.b),
                (p("norm2.g"), &b.norm2.g),
                (p("norm2.b"), &b.norm2.b),
                (p("mlp.fc1.w"), &b.fc1.w),
                (p("mlp.fc1.b"), &b.fc1.b),
                (p("mlp.fc2.w"), &b.fc2.w),
                (p("mlp.fc2.b"), &b.fc2.b),
            ]);
            if let Some(m) = &b.blend {
                out.push((blend_param_name(i), m.ratios()));
            }
        }
        out.extend([
            ("norm.g".into(), &self.norm.g),
            ("norm.b".into(), &self.norm.b),
            ("head.fc1.w".into(), &self.head.fc1.w),
            ("head.fc1.b".into(), &self.head.fc1.b),
            ("head.fc2.w".into(), &self.head.fc2.w),
            ("head.fc2.b".into(), &self.head.fc2.b),
        ]);
        out
    }

    /// Mutable counterpart of [`params`](Self::params), same order and names.
    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("embed.patch.w".into(), &mut self.patch.w),
            ("embed.patch.b".into(), &mut self.patch.b),
            ("embed.cls".into(), &mut self.cls),
            ("embed.pos".into(), &mut self.pos),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = |s: &str| format!("blocks.{i}.{s}");
            out.extend([
                (p("norm1.g"), &mut b.norm1.g),
                (p("norm1.b"), &mut b.norm1.b),
                (p("attn.qkv.w"), &mut b.qkv.w),
                (p("attn.qkv.b"), &mut b.qkv.b),
                (p("attn.proj.w"), &mut b.proj.w),
                (p("attn.proj.b"), &mut b.proj.b),
                (p("norm2.g"), &mut b.norm2.g),
                (p("norm2.b"), &mut b.norm2.b),
                (p("mlp.fc1.w"), &mut b.fc1.w),
                (p("mlp.fc1.b"), &mut b.fc1.b),
                (p("mlp.fc2.w"), &mut b.fc2.w),
                (p("mlp.fc2.b"), &mut b.fc2.b),
            ]);
            if let Some(m) = &mut b.blend {
                out.push((blend_param_name(i), m.ratios_mut()));
            }
        }
        out.extend([
            ("norm.g".into(), &mut self.norm.g),
            ("norm.b".into(), &mut self.norm.b),
            ("head.fc1.w".into(), &mut self.head.fc1.w),
            ("head.fc1.b".into(), &mut self.head.fc1.b),
            ("head.fc2.w".into(), &mut self.head.fc2.w),
            ("head.fc2.b".into(), &mut self.head.fc2.b),
        ]);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Cuts `[b, n, H, W, C]` frames into a `[b·n·p, P·P·C]` patch matrix,
    /// patches in row-major grid order within each frame.
    pub fn patchify(&self, frames: &Tensor) -> Result<Tensor> {
        let c = &self.config;
        let expected = [c.n_frames, c.image_size, c.image_size, c.channels];
        let s = frames.shape();
        if s.len() != 5 || s[1..] != expected {
            return Err(Error::dim("embed", s, &expected));
        }
        let (batch, side, ps, ch) = (s[0], c.image_size / c.patch_size, c.patch_size, c.channels);
        let (h, w) = (c.image_size, c.image_size);
        let pd = c.patch_dim();
        let mut out = Vec::with_capacity(batch * c.n_frames * side * side * pd);
        let src = frames.data();
        for f in 0..batch * c.n_frames {
            let frame = &src[f * h * w * ch..(f + 1) * h * w * ch];
            for pr in 0..side {
                for pc in 0..side {
                    for y in 0..ps {
                        let row = (pr * ps + y) * w + pc * ps;
                        out.extend_from_slice(&frame[row * ch..(row + ps) * ch]);
                    }
                }
            }
        }
        Tensor::new([batch * c.n_frames * side * side, pd], out)
    }

    fn embed_with(&self, tape: &mut Tape, binder: &mut Binder, frames: &Tensor) -> Result<Var> {
        let c = &self.config;
        let batch = frames.shape()[0];
        let z = c.embed_dim;
        let patches = tape.constant(self.patchify(frames)?);
        let x = binder.linear(tape, "embed.patch", &self.patch, patches)?;
        let x = tape.reshape(x, &[batch, c.n_frames * c.patches_per_frame(), z])?;
        let cls = binder.bind(tape, "embed.cls".into(), &self.cls);
        let zeros = tape.constant(Tensor::zeros([batch, 1, z]));
        let cls = tape.add_trailing(zeros, cls)?;
        let x = tape.concat(&[cls, x], 1)?;
        let pos = binder.bind(tape, "embed.pos".into(), &self.pos);
        tape.add_trailing(x, pos)
    }

    /// Token sequence `[b, n·p + 1, z]` for a batch of frames `[b, n, H, W, C]`.
    pub fn embed(&self, tape: &mut Tape, frames: &Tensor) -> Result<Forward> {
        let mut binder = Binder {
            no_grad: false,
            bindings: Vec::new(),
        };
        let output = self.embed_with(tape, &mut binder, frames)?;
        Ok(Forward {
            output,
            bindings: binder.bindings,
        })
    }

    fn attention(&self, tape: &mut Tape, binder: &mut Binder, i: usize, h: Var) -> Result<Var> {
        let block = &self.blocks[i];
        let qkv = binder.linear(tape, &format!("blocks.{i}.attn.qkv"), &block.qkv, h)?;
        let ctx = tape.attention(qkv, self.config.heads)?;
        binder.linear(tape, &format!("blocks.{i}.attn.proj"), &block.proj, ctx)
    }

    fn block_with(&self, tape: &mut Tape, binder: &mut Binder, i: usize, x: Var, opts: &ForwardOptions) -> Result<Var> {
        let c = &self.config;
        let s = tape.shape(x).to_vec();
        if s.len() != 3 || s[1] != c.tokens() || s[2] != c.embed_dim {
            return Err(Error::dim("encoder block", &s, &[0, c.tokens(), c.embed_dim]));
        }
        let block = &self.blocks[i];
        let u = match &block.blend {
            Some(m) => {
                let r = binder.bind(tape, blend_param_name(i), m.ratios());
                let map = m.permutation_map();
                if opts.faulty_blend_grad {
                    blend::blend_tokens_with_faulty_grad(tape, r, x, c.n_frames, map)?
                } else {
                    blend::blend_tokens(tape, r, x, c.n_frames, map)?
                }
            }
            None => x,
        };
        let h = binder.norm(tape, &format!("blocks.{i}.norm1"), &block.norm1, u)?;
        let a = self.attention(tape, binder, i, h)?;
        let y = tape.add(x, a)?;
        let h = binder.norm(tape, &format!("blocks.{i}.norm2"), &block.norm2, y)?;
        let h = binder.linear(tape, &format!("blocks.{i}.mlp.fc1"), &block.fc1, h)?;
        let h = tape.gelu(h);
        let h = binder.linear(tape, &format!("blocks.{i}.mlp.fc2"), &block.fc2, h)?;
        tape.add(y, h)
    }

    /// Applies encoder block `index` to tokens `x`.
    pub fn forward_block(&self, tape: &mut Tape, index: usize, x: Var) -> Result<Forward> {
        let mut binder = Binder {
            no_grad: false,
            bindings: Vec::new(),
        };
        let output = self.block_with(tape, &mut binder, index, x, &ForwardOptions::default())?;
        Ok(Forward {
            output,
            bindings: binder.bindings,
        })
    }

    /// Full forward pass. Classifier output is `[b, C]`, frame regressor
    /// `[b, n, 6]`, future regressor `[b, 6]`.
    pub fn forward(&self, tape: &mut Tape, frames: &Tensor, opts: ForwardOptions) -> Result<Forward> {
        let c = &self.config;
        let mut binder = Binder {
            no_grad: opts.no_grad,
            bindings: Vec::new(),
        };
        let batch = frames.shape().first().copied().unwrap_or(0);
        let mut x = self.embed_with(tape, &mut binder, frames)?;
        for i in 0..c.depth {
            x = self.block_with(tape, &mut binder, i, x, &opts)?;
        }
        let cls = tape.narrow(x, 1, 0, 1)?;
        let cls = tape.reshape(cls, &[batch, c.embed_dim])?;
        let h = binder.norm(tape, "norm", &self.norm, cls)?;
        let h = binder.linear(tape, "head.fc1", &self.head.fc1, h)?;
        let h = tape.tanh(h);
        let h = if opts.training && c.dropout > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.dropout_seed);
            tape.dropout(h, c.dropout, &mut rng)?
        } else {
            h
        };
        let out = binder.linear(tape, "head.fc2", &self.head.fc2, h)?;
        let output = match c.head {
            HeadKind::FrameRegressor => tape.reshape(out, &[batch, c.n_frames, TARGET_WIDTH])?,
            _ => out,
        };
        Ok(Forward {
            output,
            bindings: binder.bindings,
        })
    }

    /// Evaluation-mode forward pass returning the head output.
    pub fn predict(&self, frames: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, frames, ForwardOptions::eval())?;
        Ok(tape.value(fwd.output).clone())
    }

    /// Copies the gradients of the last backward pass into each parameter's `grad`.
    pub fn store_grads(&mut self, tape: &Tape, fwd: &Forward) -> Result<()> {
        let by_name: std::collections::HashMap<&str, Var> =
            fwd.bindings.iter().map(|(n, v)| (n.as_str(), *v)).collect();
        for (name, t) in self.params_mut() {
            match by_name.get(name.as_str()) {
                Some(&v) => tape.write_grad(v, t)?,
                None => t.zero_grad(),
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in self.params_mut() {
            t.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frames(cfg: &ModelConfig, batch: usize, seed: u64) -> Tensor {
        let shape = [batch, cfg.n_frames, cfg.image_size, cfg.image_size, cfg.channels];
        let mut t = trunc_normal(&shape, 1.0, seed);
        t.data_mut().iter_mut().for_each(|v| *v = v.abs());
        t
    }

    #[test]
    fn toy_sequence_length() {
        let cfg = ModelConfig::toy(8, HeadKind::FrameRegressor);
        let model = VideoViT::new(cfg.clone()).unwrap();
        let mut tape = Tape::new();
        let x = frames(&cfg, 2, 1);
        let tokens = model.embed(&mut tape, &x).unwrap();
        assert_eq!(tape.shape(tokens.output), &[2, 33, 64]);
    }

    #[test]
    fn zero_pixels_and_weights_give_cls_plus_pos() {
        let cfg = ModelConfig::micro(HeadKind::FutureRegressor);
        let mut model = VideoViT::new(cfg.clone()).unwrap();
        model.patch.w = Tensor::zeros(model.patch.w.shape().to_vec());
        let mut tape = Tape::new();
        let x = Tensor::zeros([1, 2, 8, 8, 1]);
        let tokens = model.embed(&mut tape, &x).unwrap();
        let out = tape.value(tokens.output).data();
        let z = cfg.embed_dim;
        for t in 0..cfg.tokens() {
            for k in 0..z {
                let cls = if t == 0 { model.cls.data()[k] } else { 0.0 };
                assert_eq!(out[t * z + k], cls + model.pos.data()[t * z + k]);
            }
        }
    }

    #[test]
    fn head_shapes() {
        for (head, shape) in [
            (HeadKind::Classifier { classes: 4 }, vec![3, 4]),
            (HeadKind::FrameRegressor, vec![3, 8, 6]),
            (HeadKind::FutureRegressor, vec![3, 6]),
        ] {
            let mut cfg = ModelConfig::toy(8, head);
            cfg.depth = 3;
            cfg.embed_dim = 16;
            cfg.heads = 2;
            let model = VideoViT::new(cfg.clone()).unwrap();
            let y = model.predict(&frames(&cfg, 3, 2)).unwrap();
            assert_eq!(y.shape(), shape.as_slice());
        }
    }

    #[test]
    fn wrong_frame_size_is_dimension_error() {
        let cfg = ModelConfig::micro(HeadKind::FutureRegressor);
        let model = VideoViT::new(cfg).unwrap();
        assert!(matches!(
            model.predict(&Tensor::zeros([1, 2, 9, 9, 1])),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn zero_branch_weights_leave_block_input_unchanged() {
        let cfg = ModelConfig::micro(HeadKind::FutureRegressor);
        let mut model = VideoViT::new(cfg.clone()).unwrap();
        for b in &mut model.blocks {
            for l in [&mut b.qkv, &mut b.proj, &mut b.fc1, &mut b.fc2] {
                l.w = Tensor::zeros(l.w.shape().to_vec());
                l.b = Tensor::zeros(l.b.shape().to_vec());
            }
        }
        let mut tape = Tape::new();
        let x = tape.constant(trunc_normal(&[2, cfg.tokens(), cfg.embed_dim], 1.0, 5));
        for i in 0..cfg.depth {
            let y = model.forward_block(&mut tape, i, x).unwrap();
            assert_eq!(tape.value(y.output).data(), tape.value(x).data());
        }
    }

    #[test]
    fn param_names_are_unique_and_aligned() {
        let mut model = VideoViT::new(ModelConfig::toy(8, HeadKind::FrameRegressor)).unwrap();
        let names: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
        let mut_names: Vec<String> = model.params_mut().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, mut_names);
        let set: std::collections::BTreeSet<_> = names.iter().collect();
        assert_eq!(set.len(), names.len());
        assert!(names.contains(&"blend.R.layer1".to_string()));
        assert!(names.contains(&"blend.R.layer2".to_string()));
    }

    #[test]
    fn head_replacement_keeps_encoder() {
        let mut model = VideoViT::new(ModelConfig::micro(HeadKind::FrameRegressor)).unwrap();
        let before = model.blocks.clone();
        model.replace_head(HeadKind::FutureRegressor, 99).unwrap();
        assert_eq!(model.blocks, before);
        assert_eq!(model.head.fc2.w.shape(), &[8, 6]);
    }
}
