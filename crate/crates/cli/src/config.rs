use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use wmlab_core::backbone::ModelConfig;
use wmlab_core::diffusion::SamplerConfig;
use wmlab_core::metrics::MetricConfig;
use wmlab_core::trainer::TrainConfig;
use wmlab_core::Error;

/// Procedural dataset settings used when a flag is not given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub clips: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub fps: u8,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            clips: 8,
            frames: 40,
            height: 32,
            width: 48,
            fps: 10,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutConfig {
    /// Reverse steps per chunk.
    pub sampler_steps: usize,
    pub guidance: f64,
    pub clip_denoised: bool,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        let s = SamplerConfig::default();
        Self {
            sampler_steps: s.steps,
            guidance: s.guidance,
            clip_denoised: s.clip_denoised,
        }
    }
}

impl RolloutConfig {
    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            steps: self.sampler_steps,
            guidance: self.guidance,
            clip_denoised: self.clip_denoised,
        }
    }
}

/// Everything an experiment depends on. Missing sections take their
/// defaults, which together form the desk-scale setup; a present `model`
/// section must list every field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub rollout: RolloutConfig,
    pub eval: MetricConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: desk_model(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            rollout: RolloutConfig::default(),
            eval: MetricConfig::default(),
        }
    }
}

pub fn desk_model() -> ModelConfig {
    ModelConfig {
        depth: 4,
        hidden: 64,
        heads: 4,
        patch: 4,
        ..ModelConfig::default()
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
            .context("reading run config")
    }

    /// Every problem in the model and training sections.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Err(e) = self.model.validate() {
            out.push(e.to_string());
        }
        out.extend(self.train.problems());
        if self.rollout.sampler_steps == 0 || self.rollout.sampler_steps > self.model.t_max {
            out.push(format!(
                "rollout sampler_steps {} must lie in [1, {}]",
                self.rollout.sampler_steps, self.model.t_max
            ));
        }
        if let Err(e) = self.eval.validate() {
            out.push(e.to_string());
        }
        out
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")).into())
        }
    }

    /// SHA-256 of the compact JSON form. Field order is fixed by the struct
    /// definitions, so equal configs hash equally.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_configs_fill_defaults_and_reject_unknown_keys() {
        let c: RunConfig = serde_json::from_str(r#"{"train": {"seed": 3}}"#).unwrap();
        assert_eq!(c.train.seed, 3);
        assert_eq!(c.model, desk_model());
        assert!(serde_json::from_str::<RunConfig>(r#"{"trian": {}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"data": {"clip": 2}}"#).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.train.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn default_is_valid() {
        assert!(RunConfig::default().problems().is_empty());
    }
}
