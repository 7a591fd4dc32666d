//! Binary checkpoints: a JSON header followed by named tensor snapshots.
//!
//! Layout: `PBCK`, u32 version, u64 header length, header JSON, u32 tensor
//! count, then per tensor a u32 name length, the UTF-8 name and a tensor
//! snapshot. All integers little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{blend_param_name, ModelConfig, VideoViT};
use crate::blend::{BlendMatrix, BlendVariant, PermutationMap};
use crate::error::{Error, Result};
use crate::tensor::{read_u32, read_u64, Tensor};

const MAGIC: &[u8; 4] = b"PBCK";
const VERSION: u32 = 1;

/// Non-tensor state of one blend layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlendRecord {
    pub layer: usize,
    pub variant: BlendVariant,
    pub seed: u64,
    pub map: Option<PermutationMap>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    blends: Vec<BlendRecord>,
    #[serde(default)]
    meta: serde_json::Value,
}

/// Model parameters plus optional extra tensors (e.g. optimizer moments) and metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub blends: Vec<BlendRecord>,
    pub tensors: Vec<(String, Tensor)>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn from_model(model: &VideoViT) -> Self {
        Self {
            config: model.config().clone(),
            blends: model
                .blend_matrices()
                .map(|(layer, m)| BlendRecord {
                    layer,
                    variant: m.variant(),
                    seed: m.seed(),
                    map: m.permutation_map().cloned(),
                })
                .collect(),
            tensors: model
                .params()
                .into_iter()
                .map(|(n, t)| (n, Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid shape")))
                .collect(),
            meta: serde_json::Value::Null,
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Rebuilds the model. With `expected`, a checkpoint whose configuration
    /// differs is rejected with a configuration error.
    pub fn to_model(&self, expected: Option<&ModelConfig>) -> Result<VideoViT> {
        if let Some(want) = expected {
            if want != &self.config {
                return Err(Error::Config(format!(
                    "checkpoint configuration does not match: stored {}, expected {}",
                    serde_json::to_string(&self.config)?,
                    serde_json::to_string(want)?
                )));
            }
        }
        let mut model = VideoViT::new(self.config.clone())?;
        for rec in &self.blends {
            let name = blend_param_name(rec.layer);
            let ratios = self
                .tensor(&name)
                .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
            let m = BlendMatrix::from_parts(ratios.clone(), rec.variant, rec.map.clone(), rec.seed)?;
            let slot = model
                .blend_matrix_mut(rec.layer)
                .ok_or_else(|| Error::Format(format!("layer {} has no blend in the configuration", rec.layer)))?;
            *slot = m;
        }
        for (name, t) in model.params_mut() {
            let stored = self
                .tensor(&name)
                .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
            if stored.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {:?}, model expects {:?}",
                    stored.shape(),
                    t.shape()
                )));
            }
            t.data_mut().copy_from_slice(stored.data());
        }
        Ok(model)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            blends: self.blends.clone(),
            meta: self.meta.clone(),
        })?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            t.write_snapshot(w)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let len = read_u64(r)? as usize;
        let mut header = vec![0u8; len];
        r.read_exact(&mut header)?;
        let header: Header = serde_json::from_slice(&header)?;
        let count = read_u32(r)? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let n = read_u32(r)? as usize;
            let mut name = vec![0u8; n];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            tensors.push((name, Tensor::read_snapshot(r)?));
        }
        Ok(Self {
            config: header.config,
            blends: header.blends,
            tensors,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

impl VideoViT {
    pub fn save(&self, path: &Path) -> Result<()> {
        Checkpoint::from_model(self).save(path)
    }

    /// Loads a model, rejecting checkpoints whose configuration differs from `expected`.
    pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<Self> {
        Checkpoint::load(path)?.to_model(expected)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::HeadKind;
    use crate::rng::trunc_normal;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut cfg = ModelConfig::micro(HeadKind::Classifier { classes: 3 });
        cfg.blend_variant = BlendVariant::RandomPerFrame;
        let mut model = VideoViT::new(cfg.clone()).unwrap();
        *model.blend_matrix_mut(1).unwrap().ratios_mut() = trunc_normal(&[2, 2], 1.0, 4).with_requires_grad(true);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        model.save(&path).unwrap();
        let back = VideoViT::load(&path, Some(&cfg)).unwrap();
        for ((n1, a), (n2, b)) in model.params().into_iter().zip(back.params()) {
            assert_eq!(n1, n2);
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b), "{n1}");
        }
        assert_eq!(
            model.blend_matrices().next().unwrap().1.permutation_map(),
            back.blend_matrices().next().unwrap().1.permutation_map()
        );
    }

    #[test]
    fn mismatched_config_rejected() {
        let cfg = ModelConfig::micro(HeadKind::FutureRegressor);
        let model = VideoViT::new(cfg.clone()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        model.save(&path).unwrap();
        let mut other = cfg;
        other.depth = 3;
        assert!(matches!(VideoViT::load(&path, Some(&other)), Err(Error::Config(_))));
    }

    #[test]
    fn garbage_rejected() {
        let mut bytes: &[u8] = b"nope";
        assert!(matches!(Checkpoint::read_from(&mut bytes), Err(Error::Format(_))));
    }
}
