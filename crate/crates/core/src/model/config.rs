use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::blend::BlendVariant;
use crate::error::{Error, Result};

/// Values regressed per frame: position (x, y, z) then velocity (x, y, z).
pub const TARGET_WIDTH: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum HeadKind {
    /// `classes` logits.
    Classifier { classes: usize },
    /// `n × 6` values, one position/velocity row per input frame.
    FrameRegressor,
    /// `6` values for a single future frame.
    FutureRegressor,
}

impl HeadKind {
    pub fn outputs(self, n_frames: usize) -> usize {
        match self {
            HeadKind::Classifier { classes } => classes,
            HeadKind::FrameRegressor => n_frames * TARGET_WIDTH,
            HeadKind::FutureRegressor => TARGET_WIDTH,
        }
    }

    pub fn is_regression(self) -> bool {
        !matches!(self, HeadKind::Classifier { .. })
    }
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_frames: usize,
    pub image_size: usize,
    pub patch_size: usize,
    #[serde(default = "one")]
    pub channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// 0-based indices of the encoder blocks that blend before attention.
    #[serde(default)]
    pub blend_layers: BTreeSet<usize>,
    #[serde(default)]
    pub blend_variant: BlendVariant,
    pub head: HeadKind,
    pub head_hidden: usize,
    /// Dropout rate after the head's hidden activation.
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale defaults: 32px frames cut into four 16px patches, width 64,
    /// four blocks, blending in blocks 1 and 2.
    pub fn toy(n_frames: usize, head: HeadKind) -> Self {
        Self {
            n_frames,
            image_size: 32,
            patch_size: 16,
            channels: 1,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            blend_layers: BTreeSet::from([1, 2]),
            blend_variant: BlendVariant::SameLocation,
            head,
            head_hidden: 64,
            dropout: 0.0,
            seed: 0,
        }
    }

    /// Two frames of four patches, width 8, two blocks: small enough for
    /// exhaustive finite differences.
    pub fn micro(head: HeadKind) -> Self {
        Self {
            n_frames: 2,
            image_size: 8,
            patch_size: 4,
            channels: 1,
            embed_dim: 8,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            blend_layers: BTreeSet::from([1]),
            blend_variant: BlendVariant::SameLocation,
            head,
            head_hidden: 8,
            dropout: 0.0,
            seed: 0,
        }
    }

    /// ViT-B over 8 RGB frames of 224px, blending in the second and third block.
    pub fn vit_b(head: HeadKind) -> Self {
        Self {
            n_frames: 8,
            image_size: 224,
            patch_size: 16,
            channels: 3,
            embed_dim: 768,
            depth: 12,
            heads: 12,
            mlp_ratio: 4,
            blend_layers: BTreeSet::from([1, 2]),
            blend_variant: BlendVariant::SameLocation,
            head,
            head_hidden: 768,
            dropout: 0.0,
            seed: 0,
        }
    }

    pub fn patches_per_frame(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn tokens(&self) -> usize {
        self.n_frames * self.patches_per_frame() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_frames", self.n_frames),
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("embed_dim", self.embed_dim),
            ("depth", self.depth),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("head_hidden", self.head_hidden),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if let Some(&bad) = self.blend_layers.iter().find(|&&l| l >= self.depth) {
            return Err(Error::Config(format!(
                "blend layer {bad} out of range for depth {}",
                self.depth
            )));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "heads {} does not divide embed_dim {}",
                self.heads, self.embed_dim
            )));
        }
        if let HeadKind::Classifier { classes: 0 } = self.head {
            return Err(Error::Config("classifier needs at least one class".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_arithmetic() {
        let c = ModelConfig::toy(8, HeadKind::FrameRegressor);
        assert_eq!(c.patches_per_frame(), 4);
        assert_eq!(c.tokens(), 33);
        assert_eq!(ModelConfig::vit_b(HeadKind::FutureRegressor).patches_per_frame(), 196);
    }

    #[test]
    fn invalid_configs() {
        let mut c = ModelConfig::toy(8, HeadKind::FrameRegressor);
        c.validate().unwrap();
        c.blend_layers.insert(4);
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ModelConfig::toy(8, HeadKind::FrameRegressor);
        c.heads = 5;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy(8, HeadKind::FrameRegressor);
        c.patch_size = 5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut v = serde_json::to_value(ModelConfig::toy(8, HeadKind::FutureRegressor)).unwrap();
        v["depht"] = 3.into();
        assert!(serde_json::from_value::<ModelConfig>(v).is_err());
    }
}
