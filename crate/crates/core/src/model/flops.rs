//! Analytic multiply-accumulate counts for one forward pass over one clip.

use serde::Serialize;

use super::ModelConfig;

/// How [`count_macs`] counts.
pub const MAC_CONVENTION: &str = "multiply-accumulates per clip, forward pass only; \
one MAC per scalar multiply-add of every matrix product (patch embedding, qkv, \
attention scores, attention context, output projection, MLP, head) and of every \
blend (n*n*p*z per blend layer); norms, softmax, activations and bias adds are not counted";

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct MacReport {
    pub patch_embed: u64,
    pub attention: u64,
    pub mlp: u64,
    pub blend: u64,
    pub head: u64,
    pub total: u64,
}

impl MacReport {
    /// Share of the total spent in blend layers.
    pub fn blend_fraction(&self) -> f64 {
        self.blend as f64 / self.total as f64
    }
}

pub fn count_macs(c: &ModelConfig) -> MacReport {
    let n = c.n_frames as u64;
    let p = c.patches_per_frame() as u64;
    let t = c.tokens() as u64;
    let z = c.embed_dim as u64;
    let depth = c.depth as u64;
    let hidden = z * c.mlp_ratio as u64;

    let patch_embed = n * p * c.patch_dim() as u64 * z;
    let attention = depth * (t * z * 3 * z + 2 * t * t * z + t * z * z);
    let mlp = depth * 2 * t * z * hidden;
    let blend = c.blend_layers.len() as u64 * n * n * p * z;
    let head = z * c.head_hidden as u64 + c.head_hidden as u64 * c.head.outputs(c.n_frames) as u64;
    MacReport {
        patch_embed,
        attention,
        mlp,
        blend,
        head,
        total: patch_embed + attention + mlp + blend + head,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::HeadKind;

    #[test]
    fn vit_b_blend_cost() {
        let r = count_macs(&ModelConfig::vit_b(HeadKind::Classifier { classes: 400 }));
        assert_eq!(r.blend, 2 * 64 * 196 * 768);
        assert_eq!(r.blend, 19_267_584);
        assert!(r.blend_fraction() < 1e-3);
    }

    #[test]
    fn toy_blend_cost() {
        let r = count_macs(&ModelConfig::toy(8, HeadKind::FrameRegressor));
        assert_eq!(r.blend, 2 * 64 * 4 * 64);
    }

    #[test]
    fn no_blend_layers_no_blend_cost() {
        let mut c = ModelConfig::toy(8, HeadKind::FrameRegressor);
        c.blend_layers.clear();
        assert_eq!(count_macs(&c).blend, 0);
    }
}
