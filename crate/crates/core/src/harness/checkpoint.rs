//! Training snapshots that resume bit-for-bit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::dataset::SyntheticDataset;
use super::io::{atomic_write, read_json, to_json_bytes};
use super::model::Ecvt;
use super::train::{TrainState, Trainer};
use crate::error::{Error, Result};
use crate::parallel::Execution;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub num_classes: usize,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn new(config: &RunConfig, num_classes: usize, state: &TrainState) -> Self {
        Self {
            config: config.clone(),
            num_classes,
            state: state.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        to_json_bytes(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let ck: Self = serde_json::from_slice(bytes).map_err(|e| Error::json("checkpoint", e))?;
        ck.config.validate()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Self = read_json(path)?;
        ck.config.validate()?;
        Ok(ck)
    }

    /// Rebuilds the model skeleton and checks that the stored parameters
    /// have the layout it expects.
    pub fn model(&self) -> Result<Ecvt> {
        let (model, fresh) = Ecvt::init(&self.config.model, self.config.toggles, self.num_classes)?;
        let stored = &self.state.store;
        let same_layout = fresh.len() == stored.len()
            && fresh
                .iter()
                .zip(stored.iter())
                .all(|((_, a, ta), (_, b, tb))| a == b && ta.shape() == tb.shape());
        if !same_layout {
            return Err(Error::Config(
                "checkpoint parameters do not match the configured model".into(),
            ));
        }
        Ok(model)
    }

    /// Trainer and state ready to continue from the saved step.
    pub fn resume<'d>(&self, data: &'d SyntheticDataset, exec: Execution) -> Result<(Trainer<'d>, TrainState)> {
        if data.num_classes() != self.num_classes {
            return Err(Error::Config(format!(
                "checkpoint has {} classes, dataset {}",
                self.num_classes,
                data.num_classes()
            )));
        }
        let trainer = Trainer::with_model(&self.config, self.model()?, data, exec)?;
        Ok((trainer, self.state.clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::dataset::{generate_dataset, DatasetSpec};
    use crate::harness::optim::OptimConfig;

    fn config() -> RunConfig {
        RunConfig {
            dataset: DatasetSpec {
                num_videos: 6,
                num_classes: 3,
                ..DatasetSpec::default()
            },
            optimizer: OptimConfig {
                total_steps: 8,
                warmup_steps: 2,
                batch_size: 2,
                ..OptimConfig::default()
            },
            ..RunConfig::default()
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let cfg = config();
        let data = generate_dataset(&cfg.dataset, cfg.seed).unwrap();
        let (trainer, mut state) = Trainer::new(&cfg, &data, Execution::Sequential).unwrap();
        trainer.run_until(&mut state, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let ck = Checkpoint::new(&cfg, 3, &state);
        ck.save(&path).unwrap();
        let first = std::fs::read(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded, ck);
        assert_eq!(loaded.to_bytes().unwrap(), first);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let cfg = config();
        let data = generate_dataset(&cfg.dataset, cfg.seed).unwrap();
        let (trainer, mut straight) = Trainer::new(&cfg, &data, Execution::Sequential).unwrap();
        let full = trainer.run_until(&mut straight, 8).unwrap();

        let (trainer, mut state) = Trainer::new(&cfg, &data, Execution::Sequential).unwrap();
        let mut split = trainer.run_until(&mut state, 5).unwrap();
        let bytes = Checkpoint::new(&cfg, 3, &state).to_bytes().unwrap();
        let (resumed, mut state) = Checkpoint::from_bytes(&bytes)
            .unwrap()
            .resume(&data, Execution::Parallel)
            .unwrap();
        split.extend(resumed.run_until(&mut state, 8).unwrap());
        assert_eq!(split, full);
        assert_eq!(state, straight);
    }

    #[test]
    fn mismatched_model_is_rejected() {
        let cfg = config();
        let data = generate_dataset(&cfg.dataset, cfg.seed).unwrap();
        let (_, state) = Trainer::new(&cfg, &data, Execution::Sequential).unwrap();
        let mut ck = Checkpoint::new(&cfg, 3, &state);
        ck.config.toggles = crate::harness::model::Toggles::BASELINE;
        assert!(matches!(ck.model(), Err(Error::Config(_))));
        let ck = Checkpoint::new(&cfg, 4, &state);
        assert!(ck.resume(&data, Execution::Sequential).is_err());
    }
}
