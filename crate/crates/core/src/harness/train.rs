//! Mini-batch training and split evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::dataset::{Split, SyntheticDataset};
use super::model::{batch_candidates, Ecvt, Sample};
use super::optim::AdamW;
use crate::error::{Error, Result};
use crate::eval::{evaluate_with, EvalReport, Labeled};
use crate::head::{ActionInstance, DecodeConfig};
use crate::losses::{LossWeights, TERM_NAMES};
use crate::numerics::{ParamStore, Tape, Tensor};
use crate::parallel::{self, Execution};

/// One line of the metrics history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepRecord {
    pub step: usize,
    pub loss_total: f64,
    pub loss_cls: f64,
    pub loss_reg: f64,
    pub loss_sem: f64,
    pub loss_cal: f64,
    pub lr: f64,
}

/// Epoch-shuffled batch order over the training videos.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl Sampler {
    pub fn new(indices: Vec<usize>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        let mut order = indices;
        order.shuffle(&mut rng);
        Self { rng, order, cursor: 0 }
    }

    /// Next `min(size, n)` distinct indices. A partial tail is dropped and
    /// a new epoch starts.
    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let b = size.min(self.order.len());
        if self.cursor + b > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let batch = self.order[self.cursor..self.cursor + b].to_vec();
        self.cursor += b;
        batch
    }
}

/// Everything that evolves during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Number of completed updates.
    pub step: usize,
    pub store: ParamStore,
    pub optimizer: AdamW,
    pub sampler: Sampler,
}

/// Mean loss terms and summed gradients of one batch.
struct BatchResult {
    parts: [f64; 4],
    total: f64,
    grads: Vec<Tensor>,
}

pub struct Trainer<'d> {
    pub config: RunConfig,
    pub model: Ecvt,
    pub data: &'d SyntheticDataset,
    pub exec: Execution,
    train_indices: Vec<usize>,
}

impl<'d> Trainer<'d> {
    /// Builds the model and a fresh state at step 0.
    pub fn new(config: &RunConfig, data: &'d SyntheticDataset, exec: Execution) -> Result<(Self, TrainState)> {
        config.validate()?;
        let (model, store) = Ecvt::init(&config.model, config.toggles, data.num_classes())?;
        let trainer = Self::with_model(config, model, data, exec)?;
        let state = TrainState {
            step: 0,
            optimizer: AdamW::new(&store),
            store,
            sampler: Sampler::new(trainer.train_indices.clone(), config.seed),
        };
        Ok((trainer, state))
    }

    pub fn with_model(config: &RunConfig, model: Ecvt, data: &'d SyntheticDataset, exec: Execution) -> Result<Self> {
        let train_indices = data.indices(Split::Train);
        if train_indices.is_empty() {
            return Err(Error::Config("dataset has no training videos".into()));
        }
        if data.spec.d_in != config.model.encoder.d_v || data.spec.d_p != config.model.d_p {
            return Err(Error::Config(format!(
                "dataset widths (d_in {}, d_p {}) do not match the model (d_v {}, d_p {})",
                data.spec.d_in, data.spec.d_p, config.model.encoder.d_v, config.model.d_p
            )));
        }
        Ok(Self {
            config: config.clone(),
            model,
            data,
            exec,
            train_indices,
        })
    }

    fn batch(&self, store: &ParamStore, indices: &[usize], step: usize) -> Result<BatchResult> {
        let samples: Vec<Sample<'_>> = indices.iter().map(|&i| self.data.videos[i].sample()).collect();
        let cands = batch_candidates(&samples)?;
        let weights = &self.config.loss;
        let jobs: Vec<usize> = (0..samples.len()).collect();
        let results = parallel::map(self.exec, &jobs, |&j| -> Result<([f64; 4], f64, Vec<Tensor>)> {
            let tape = Tape::new();
            let bound = store.bind(&tape);
            let (total, parts) = self.model.objective(
                &tape,
                &bound,
                samples[j],
                cands.matrix.as_ref(),
                &cands.positives[j],
                weights,
            )?;
            let grads = tape.backward(total)?;
            Ok((parts.values(), total.value().item(), bound.grads(&grads, store)))
        });
        let n = samples.len() as f64;
        let mut out = BatchResult {
            parts: [0.0; 4],
            total: 0.0,
            grads: store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect(),
        };
        for r in results {
            let (parts, total, grads) = r.map_err(|e| match e {
                Error::NonFinite { term } => Error::Diverged { step, term },
                other => other,
            })?;
            for k in 0..4 {
                out.parts[k] += parts[k] / n;
            }
            out.total += total / n;
            for (acc, g) in out.grads.iter_mut().zip(&grads) {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b / n;
                }
            }
        }
        if let Some(k) = out.parts.iter().position(|v| !v.is_finite()) {
            return Err(Error::Diverged {
                step,
                term: TERM_NAMES[k],
            });
        }
        if !out.total.is_finite() {
            return Err(Error::Diverged { step, term: "total" });
        }
        if out.grads.iter().any(|g| !g.all_finite()) {
            return Err(Error::Diverged { step, term: "gradient" });
        }
        Ok(out)
    }

    /// Performs update `state.step + 1` and returns its record.
    pub fn step(&self, state: &mut TrainState) -> Result<StepRecord> {
        let t = state.step + 1;
        let opt = &self.config.optimizer;
        let indices = state.sampler.next_batch(opt.batch_size);
        let batch = self.batch(&state.store, &indices, t)?;
        let lr = opt.lr_at(t);
        state.optimizer.update(&mut state.store, &batch.grads, lr, opt)?;
        state.step = t;
        let [cls, reg, sem, cal] = batch.parts;
        Ok(StepRecord {
            step: t,
            loss_total: batch.total,
            loss_cls: cls,
            loss_reg: reg,
            loss_sem: sem,
            loss_cal: cal,
            lr,
        })
    }

    /// Trains until `until` updates have been made (capped at
    /// `total_steps`), returning the logged records.
    pub fn run_until(&self, state: &mut TrainState, until: usize) -> Result<Vec<StepRecord>> {
        let total = self.config.optimizer.total_steps;
        let until = until.min(total);
        let mut history = Vec::new();
        while state.step < until {
            let rec = self.step(state)?;
            if rec.step % self.config.log_every == 0 || rec.step == total {
                history.push(rec);
            }
        }
        Ok(history)
    }

    /// Mean total loss over the training split in fixed consecutive
    /// batches, independent of the sampler.
    pub fn dataset_loss(&self, store: &ParamStore) -> Result<f64> {
        let chunks: Vec<&[usize]> = self.train_indices.chunks(self.config.optimizer.batch_size).collect();
        let mut sum = 0.0;
        for c in &chunks {
            sum += self.batch(store, c, 0)?.total * c.len() as f64;
        }
        Ok(sum / self.train_indices.len() as f64)
    }

    pub fn evaluate(&self, store: &ParamStore, split: Split) -> Result<EvalReport> {
        run_eval(
            &self.model,
            store,
            self.data,
            split,
            &self.config.decode,
            &self.config.thresholds,
            self.exec,
        )
    }
}

/// Trains from scratch for the configured number of steps.
pub fn train(
    config: &RunConfig,
    data: &SyntheticDataset,
    exec: Execution,
) -> Result<(Ecvt, TrainState, Vec<StepRecord>)> {
    let (trainer, mut state) = Trainer::new(config, data, exec)?;
    let history = trainer.run_until(&mut state, config.optimizer.total_steps)?;
    Ok((trainer.model, state, history))
}

/// Ground-truth instances of a script, scored 1.
pub fn ground_truth(video_id: &str, events: &[crate::prompt_oracle::ScriptEvent]) -> Result<Vec<Labeled>> {
    events
        .iter()
        .map(|e| {
            Ok(Labeled::new(
                video_id,
                ActionInstance::new(e.class_id, e.start, e.end, 1.0)?,
            ))
        })
        .collect()
}

/// Decodes every video of `split` and scores the result. An empty split
/// yields a report with zero counts and undefined metrics.
pub fn run_eval(
    model: &Ecvt,
    store: &ParamStore,
    data: &SyntheticDataset,
    split: Split,
    decode: &DecodeConfig,
    thresholds: &[f64],
    exec: Execution,
) -> Result<EvalReport> {
    let videos = data.split(split);
    let per_video = parallel::map(exec, &videos, |v| -> Result<(Vec<Labeled>, Vec<Labeled>)> {
        let id = &v.script.video_id;
        let preds = model
            .predict(store, v.sample(), decode)?
            .into_iter()
            .map(|p| Labeled::new(id.as_str(), p))
            .collect();
        Ok((preds, ground_truth(id, &v.script.events)?))
    });
    let (mut preds, mut gts) = (Vec::new(), Vec::new());
    for r in per_video {
        let (p, g) = r?;
        preds.extend(p);
        gts.extend(g);
    }
    evaluate_with(exec, &preds, &gts, thresholds)
}

/// Loss weights that leave only classification and regression active.
pub fn detection_only(weights: &LossWeights) -> LossWeights {
    LossWeights {
        lambda_sem: 0.0,
        lambda_cal: 0.0,
        ..*weights
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::dataset::{generate_dataset, DatasetSpec};
    use crate::harness::model::Toggles;
    use crate::harness::optim::OptimConfig;

    fn small_config(toggles: Toggles) -> RunConfig {
        RunConfig {
            toggles,
            dataset: DatasetSpec {
                num_videos: 6,
                num_classes: 3,
                val_fraction: 0.34,
                ..DatasetSpec::default()
            },
            optimizer: OptimConfig {
                total_steps: 6,
                warmup_steps: 2,
                batch_size: 2,
                ..OptimConfig::default()
            },
            ..RunConfig::default()
        }
    }

    #[test]
    fn sampler_covers_each_epoch_once() {
        let mut s = Sampler::new((0..5).collect(), 3);
        let mut seen: Vec<usize> = (0..2).flat_map(|_| s.next_batch(2)).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 4);
        // The fifth index is dropped as a partial tail; a new epoch begins.
        let b = s.next_batch(2);
        assert_eq!(b.len(), 2);
        assert_eq!(s.cursor, 2);
        assert_eq!(Sampler::new(vec![7], 0).next_batch(4), vec![7]);
    }

    #[test]
    fn zero_steps_leave_initialization() {
        let mut cfg = small_config(Toggles::FULL);
        cfg.optimizer.total_steps = 0;
        cfg.optimizer.warmup_steps = 0;
        let data = generate_dataset(&cfg.dataset, cfg.seed).unwrap();
        let (_, init) = Ecvt::init(&cfg.model, cfg.toggles, 3).unwrap();
        let (_, state, history) = train(&cfg, &data, Execution::Sequential).unwrap();
        assert!(history.is_empty());
        assert_eq!(state.store, init);
    }

    #[test]
    fn history_logs_every_term_and_schedule() {
        let cfg = small_config(Toggles::FULL);
        let data = generate_dataset(&cfg.dataset, cfg.seed).unwrap();
        let (_, _, history) = train(&cfg, &data, Execution::Sequential).unwrap();
        assert_eq!(history.len(), 6);
        for r in &history {
            assert_eq!(r.lr, cfg.optimizer.lr_at(r.step));
            let recomputed =
                crate::losses::total_loss_value([r.loss_cls, r.loss_reg, r.loss_sem, r.loss_cal], &cfg.loss).unwrap();
            assert!((recomputed - r.loss_total).abs() < 1e-9);
        }
        assert_eq!(history.last().unwrap().lr, 0.0);
    }

    #[test]
    fn sequential_and_parallel_agree_bitwise() {
        let cfg = small_config(Toggles::FULL);
        let data = generate_dataset(&cfg.dataset, cfg.seed).unwrap();
        let (_, s1, h1) = train(&cfg, &data, Execution::Sequential).unwrap();
        let (_, s2, h2) = train(&cfg, &data, Execution::Parallel).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(s1, s2);
    }

    #[test]
    fn baseline_path_ignores_guidance_weights() {
        let base = small_config(Toggles::BASELINE);
        let data = generate_dataset(&base.dataset, base.seed).unwrap();
        let mut zeroed = base.clone();
        zeroed.loss = detection_only(&base.loss);
        let (_, _, h1) = train(&base, &data, Execution::Sequential).unwrap();
        let (_, _, h2) = train(&zeroed, &data, Execution::Sequential).unwrap();
        assert_eq!(h1, h2);
        assert!(h1.iter().all(|r| r.loss_sem == 0.0 && r.loss_cal == 0.0));
    }

    #[test]
    fn empty_split_gives_flagged_report() {
        let mut cfg = small_config(Toggles::BASELINE);
        cfg.dataset.val_fraction = 0.0;
        let data = generate_dataset(&cfg.dataset, cfg.seed).unwrap();
        let (trainer, state) = Trainer::new(&cfg, &data, Execution::Sequential).unwrap();
        let report = trainer.evaluate(&state.store, Split::Val).unwrap();
        assert!(report.is_empty());
        assert_eq!(report.average_map, None);
    }

    #[test]
    fn divergence_names_step_and_term() {
        let mut cfg = small_config(Toggles::BASELINE);
        cfg.optimizer.lr = 1e300;
        cfg.optimizer.warmup_steps = 0;
        cfg.optimizer.grad_clip = None;
        let data = generate_dataset(&cfg.dataset, cfg.seed).unwrap();
        match train(&cfg, &data, Execution::Sequential) {
            Err(Error::Diverged { step, term }) => {
                assert!(step >= 2);
                assert!(TERM_NAMES.contains(&term) || term == "total" || term == "gradient");
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
