//! Run configuration, read from JSON with unknown keys rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::DatasetSpec;
use super::io::read_json;
use super::model::{ModelConfig, Toggles};
use super::optim::OptimConfig;
use crate::error::{Error, Result};
use crate::eval::AVERAGE_THRESHOLDS;
use crate::head::DecodeConfig;
use crate::losses::LossWeights;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub toggles: Toggles,
    pub loss: LossWeights,
    pub optimizer: OptimConfig,
    /// Drives dataset generation and batch order. Parameter init uses
    /// `model.encoder.seed`.
    pub seed: u64,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub decode: DecodeConfig,
    #[serde(default = "default_thresholds")]
    pub thresholds: Vec<f64>,
    /// Metrics are recorded every `log_every` steps and at the final step.
    #[serde(default = "default_log_every")]
    pub log_every: usize,
}

fn default_thresholds() -> Vec<f64> {
    AVERAGE_THRESHOLDS.to_vec()
}

fn default_log_every() -> usize {
    1
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            toggles: Toggles::FULL,
            loss: LossWeights::default(),
            optimizer: OptimConfig::default(),
            seed: 0,
            dataset: DatasetSpec::default(),
            decode: DecodeConfig::default(),
            thresholds: default_thresholds(),
            log_every: 1,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.optimizer.validate()?;
        self.dataset.validate()?;
        if self.dataset.d_in != self.model.encoder.d_v {
            return Err(Error::Config(format!(
                "dataset d_in {} must equal encoder d_v {}",
                self.dataset.d_in, self.model.encoder.d_v
            )));
        }
        if self.dataset.d_p != self.model.d_p {
            return Err(Error::Config(format!(
                "dataset d_p {} must equal model d_p {}",
                self.dataset.d_p, self.model.d_p
            )));
        }
        if self.thresholds.is_empty() || self.thresholds.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return Err(Error::Config("thresholds must be non-empty and in (0, 1]".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.decode.score_thresh) || !(0.0..=1.0).contains(&self.decode.nms_iou) {
            return Err(Error::Config("decode thresholds must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::json("run config", e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let cfg: Self = read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Small low-noise train set for memorization checks, trained full
    /// batch.
    pub fn overfit() -> Self {
        let mut model = ModelConfig::default();
        model.encoder.d_v = 32;
        model.encoder.d_ff = 64;
        Self {
            model,
            dataset: DatasetSpec {
                num_videos: 20,
                num_classes: 5,
                noise_sigma: 0.1,
                d_in: 32,
                val_fraction: 0.0,
                ..DatasetSpec::default()
            },
            optimizer: OptimConfig {
                lr: 1e-2,
                batch_size: 20,
                ..OptimConfig::default()
            },
            ..Self::default()
        }
    }

    /// Held-out setup for comparing toggles. Token noise is strong enough
    /// that features alone leave classes ambiguous, and most events share
    /// the video's dominant class.
    pub fn ablation() -> Self {
        Self {
            dataset: DatasetSpec {
                num_videos: 100,
                num_classes: 5,
                noise_sigma: 2.0,
                dominant_prob: 0.9,
                val_fraction: 0.5,
                ..DatasetSpec::default()
            },
            optimizer: OptimConfig {
                total_steps: 600,
                warmup_steps: 60,
                ..OptimConfig::default()
            },
            thresholds: vec![0.5],
            log_every: 10,
            ..Self::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        for cfg in [RunConfig::default(), RunConfig::overfit(), RunConfig::ablation()] {
            cfg.validate().unwrap();
            let text = serde_json::to_string(&cfg).unwrap();
            assert_eq!(RunConfig::from_json_str(&text).unwrap(), cfg);
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut v = serde_json::to_value(RunConfig::default()).unwrap();
        v["optimizer"]["learning_rate"] = 0.1.into();
        assert!(RunConfig::from_json_str(&v.to_string()).is_err());
        let mut v = serde_json::to_value(RunConfig::default()).unwrap();
        v["tsep_enabled"] = true.into();
        assert!(RunConfig::from_json_str(&v.to_string()).is_err());
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let mut cfg = RunConfig::default();
        cfg.dataset.d_in = 8;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = RunConfig::default();
        cfg.model.d_p = 8;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
