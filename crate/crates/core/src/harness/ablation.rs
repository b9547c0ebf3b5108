//! Toggle matrix over several seeds, compared on held-out mAP.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::dataset::{generate_dataset_with, Split, SyntheticDataset};
use super::model::Toggles;
use super::train::Trainer;
use crate::error::Result;
use crate::parallel::{self, Execution};

pub const VARIANTS: [(&str, Toggles); 5] = [
    ("baseline", Toggles::BASELINE),
    ("plus_gep", Toggles::PLUS_GEP),
    ("plus_tsep", Toggles::PLUS_TSEP),
    ("simple_fusion", Toggles::SIMPLE_FUSION),
    ("full", Toggles::FULL),
];

/// Ordering checks as `(lower, higher)` variant names.
pub const ORDERINGS: [(&str, &str); 3] = [
    ("baseline", "plus_gep"),
    ("baseline", "plus_tsep"),
    ("simple_fusion", "full"),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub variant: String,
    pub seed: u64,
    pub val_map_50: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingCheck {
    pub lower: String,
    pub higher: String,
    pub margin: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub runs: Vec<AblationRun>,
    pub median_val_map_50: BTreeMap<String, f64>,
    pub checks: Vec<OrderingCheck>,
}

impl AblationReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    /// Plain-text table of medians and per-seed values.
    pub fn table(&self) -> String {
        let mut out = format!("{:<14} {:>8}  per-seed mAP@0.5\n", "variant", "median");
        for (name, _) in VARIANTS {
            let Some(m) = self.median_val_map_50.get(name) else {
                continue;
            };
            let per: Vec<String> = self
                .runs
                .iter()
                .filter(|r| r.variant == name)
                .map(|r| format!("{:.3}", r.val_map_50))
                .collect();
            out += &format!("{name:<14} {m:>8.4}  {}\n", per.join(" "));
        }
        for c in &self.checks {
            out += &format!(
                "{} <= {}: margin {:+.4} {}\n",
                c.lower,
                c.higher,
                c.margin,
                if c.pass { "ok" } else { "VIOLATED" }
            );
        }
        out
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Configuration for one cell: `seed` drives the data, the parameter
/// initialization and the batch order.
pub fn cell_config(base: &RunConfig, toggles: Toggles, seed: u64) -> RunConfig {
    let mut cfg = base.clone();
    cfg.toggles = toggles;
    cfg.seed = seed;
    cfg.model.encoder.seed = seed;
    cfg
}

fn run_cell(base: &RunConfig, data: &SyntheticDataset, name: &str, toggles: Toggles, seed: u64) -> Result<AblationRun> {
    let cfg = cell_config(base, toggles, seed);
    let (trainer, mut state) = Trainer::new(&cfg, data, Execution::Sequential)?;
    let history = trainer.run_until(&mut state, cfg.optimizer.total_steps)?;
    let report = trainer.evaluate(&state.store, Split::Val)?;
    Ok(AblationRun {
        variant: name.to_string(),
        seed,
        val_map_50: report.map_at(0.5).unwrap_or(0.0),
        final_loss: history.last().map_or(f64::NAN, |r| r.loss_total),
    })
}

/// Trains every variant on every seed. Cells run under `exec`; each cell
/// trains sequentially.
pub fn run_ablation(base: &RunConfig, seeds: &[u64], exec: Execution) -> Result<AblationReport> {
    base.validate()?;
    let datasets = parallel::map(exec, seeds, |&s| {
        generate_dataset_with(Execution::Sequential, &base.dataset, s)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let cells: Vec<(usize, usize)> = (0..VARIANTS.len())
        .flat_map(|v| (0..seeds.len()).map(move |s| (v, s)))
        .collect();
    let runs = parallel::map(exec, &cells, |&(v, s)| {
        let (name, toggles) = VARIANTS[v];
        run_cell(base, &datasets[s], name, toggles, seeds[s])
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let mut medians = BTreeMap::new();
    for (name, _) in VARIANTS {
        let mut vals: Vec<f64> = runs
            .iter()
            .filter(|r| r.variant == name)
            .map(|r| r.val_map_50)
            .collect();
        medians.insert(name.to_string(), median(&mut vals));
    }
    let checks = ORDERINGS
        .iter()
        .map(|&(lo, hi)| {
            let margin = medians[hi] - medians[lo];
            OrderingCheck {
                lower: lo.into(),
                higher: hi.into(),
                margin,
                pass: margin >= 0.0,
            }
        })
        .collect();
    Ok(AblationReport {
        seeds: seeds.to_vec(),
        runs,
        median_val_map_50: medians,
        checks,
    })
}
