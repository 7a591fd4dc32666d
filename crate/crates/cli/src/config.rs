//! Experiment configuration files.

use std::fs;
use std::path::{Path, PathBuf};

use patchblender::data::TaskSpec;
use patchblender::train::TrainPlan;
use patchblender::ModelConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IoConfig {
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

/// One experiment: model, task and training plan. Commands that only need
/// the model (MAC counts, gradient checks) accept files without the others.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub model: ModelConfig,
    #[serde(default)]
    pub task: Option<TaskSpec>,
    #[serde(default)]
    pub train: Option<TrainPlan>,
    #[serde(default)]
    pub io: IoConfig,
}

/// A parsed configuration plus its source text, echoed verbatim into outputs.
#[derive(Clone, Debug)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub text: String,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::config(format!("invalid config: {e}")))?;
        cfg.model.validate().map_err(CliError::from)?;
        if let Some(t) = &cfg.task {
            t.validate().map_err(CliError::from)?;
        }
        if let Some(p) = &cfg.train {
            p.validate().map_err(CliError::from)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<LoadedConfig, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
        Ok(LoadedConfig {
            config: Self::parse(&text)?,
            text,
        })
    }

    /// Overrides every seed (model init, data, training) with one value.
    pub fn reseed(&mut self, seed: u64) {
        self.model.seed = seed;
        if let Some(t) = &mut self.task {
            t.seed = seed;
        }
        if let Some(p) = &mut self.train {
            p.seed = seed;
        }
    }

    pub fn task(&self) -> Result<&TaskSpec, CliError> {
        self.task
            .as_ref()
            .ok_or_else(|| CliError::config("config has no task section"))
    }

    pub fn train(&self) -> Result<&TrainPlan, CliError> {
        self.train
            .as_ref()
            .ok_or_else(|| CliError::config("config has no train section"))
    }

    pub fn out_dir(&self) -> Result<&Path, CliError> {
        self.io
            .out_dir
            .as_deref()
            .ok_or_else(|| CliError::config("no output directory (set io.out_dir or pass --out)"))
    }

    pub fn checkpoint(&self) -> Result<&Path, CliError> {
        let p = self
            .io
            .checkpoint
            .as_deref()
            .ok_or_else(|| CliError::config("no checkpoint (set io.checkpoint or pass --checkpoint)"))?;
        if !p.is_file() {
            return Err(CliError::config(format!("checkpoint {} does not exist", p.display())));
        }
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "name": "m",
        "model": {"n_frames": 2, "image_size": 8, "patch_size": 4, "embed_dim": 8, "depth": 2,
                  "heads": 2, "mlp_ratio": 2, "blend_layers": [1],
                  "head": {"kind": "frame-regressor"}, "head_hidden": 8}
    }"#;

    #[test]
    fn minimal_config_parses() {
        let c = ExperimentConfig::parse(MINIMAL).unwrap();
        assert!(c.task.is_none());
        assert_eq!(c.model.blend_layers.len(), 1);
    }

    #[test]
    fn unknown_keys_and_bad_layers_are_config_errors() {
        let typo = MINIMAL.replacen("\"name\"", "\"nmae\"", 1);
        assert_eq!(ExperimentConfig::parse(&typo).unwrap_err().code, 2);
        let deep = MINIMAL.replace("[1]", "[2]");
        assert_eq!(ExperimentConfig::parse(&deep).unwrap_err().code, 2);
    }

    #[test]
    fn missing_sections_and_reseed() {
        let mut c = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(c.task().unwrap_err().code, CliError::CONFIG);
        assert_eq!(c.out_dir().unwrap_err().code, CliError::CONFIG);
        assert_eq!(c.checkpoint().unwrap_err().code, CliError::CONFIG);
        c.reseed(9);
        assert_eq!(c.model.seed, 9);
    }
}
