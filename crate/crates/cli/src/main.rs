use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Parser, Subcommand, ValueEnum};

use ecvt_core::harness::ablation::run_ablation;
use ecvt_core::harness::checkpoint::Checkpoint;
use ecvt_core::harness::config::RunConfig;
use ecvt_core::harness::dataset::{generate_dataset_with, DatasetSpec, Split, SyntheticDataset};
use ecvt_core::harness::io::{read_json, write_json, write_jsonl};
use ecvt_core::harness::suite::{run_suite, Module, DEFAULT_SEEDS};
use ecvt_core::harness::train::{run_eval, Trainer};
use ecvt_core::parallel::Execution;

#[derive(Parser)]
#[command(
    name = "ecvt",
    version,
    about = "Train and evaluate a toy semantically guided video transformer"
)]
struct Cli {
    /// Run every fan-out point on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Default,
    Overfit,
    Ablation,
}

#[derive(Subcommand)]
enum Command {
    /// Print a complete run configuration as JSON.
    Config {
        #[arg(long, value_enum, default_value_t = Preset::Default)]
        preset: Preset,
    },
    /// Generate a synthetic dataset directory.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train and write `checkpoint.json` and `metrics.jsonl` into `--out`.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint instead of initializing.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this step instead of `optimizer.total_steps`.
        #[arg(long)]
        until: Option<usize>,
    },
    /// Score a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: Split,
        #[arg(long)]
        report: PathBuf,
    },
    /// Finite-difference check of every differentiable component.
    Gradcheck {
        #[arg(long, default_value = "all")]
        module: Module,
        #[arg(long, default_value_t = DEFAULT_SEEDS)]
        seeds: u64,
        /// Also write the per-case report as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train every toggle variant over several seeds and compare val mAP@0.5.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2, 3, 4])]
        seeds: Vec<u64>,
        #[arg(long, default_value = "ablation.json")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    match run(cli.command, exec) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

/// Returns whether the command's checks passed.
fn run(command: Command, exec: Execution) -> Result<bool> {
    match command {
        Command::Config { preset } => {
            let cfg = match preset {
                Preset::Default => RunConfig::default(),
                Preset::Overfit => RunConfig::overfit(),
                Preset::Ablation => RunConfig::ablation(),
            };
            println!("{}", serde_json::to_string_pretty(&cfg)?);
        }
        Command::GenData { spec, out, seed } => {
            let spec: DatasetSpec = read_json(&spec)?;
            let data = generate_dataset_with(exec, &spec, seed)?;
            data.save(&out)?;
            println!(
                "wrote {} videos ({} val) to {}",
                data.videos.len(),
                data.indices(Split::Val).len(),
                out.display()
            );
        }
        Command::Train {
            config,
            data,
            out,
            resume,
            until,
        } => train(&config, &data, &out, resume.as_deref(), until, exec)?,
        Command::Eval {
            checkpoint,
            data,
            split,
            report,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let data = SyntheticDataset::load(&data)?;
            let model = ck.model()?;
            let r = run_eval(
                &model,
                &ck.state.store,
                &data,
                split,
                &ck.config.decode,
                &ck.config.thresholds,
                exec,
            )?;
            write_json(&report, &r)?;
            if r.is_empty() {
                println!("split has no ground truth; report is empty");
            } else {
                for (t, m) in &r.per_threshold_map {
                    println!("mAP@{t} {}", fmt_opt(*m));
                }
                println!("average mAP {}", fmt_opt(r.average_map));
            }
        }
        Command::Gradcheck { module, seeds, report } => {
            let started = std::time::Instant::now();
            let r = run_suite(module, seeds, exec)?;
            for c in &r.cases {
                println!(
                    "{:<10} {:<30} {:.3e} {}",
                    c.module.to_string(),
                    c.case,
                    c.max_rel_error,
                    if c.pass { "ok" } else { "FAIL" }
                );
            }
            println!(
                "{} cases, {seeds} seeds, worst {:.3e} (tolerance {:.0e}) in {:.1}s",
                r.cases.len(),
                r.worst(),
                r.tolerance,
                started.elapsed().as_secs_f64()
            );
            if let Some(path) = report {
                write_json(&path, &r)?;
            }
            return Ok(r.all_pass());
        }
        Command::Ablate { config, seeds, out } => {
            if seeds.is_empty() {
                bail!("need at least one seed");
            }
            let cfg = RunConfig::from_file(&config)?;
            let r = run_ablation(&cfg, &seeds, exec)?;
            print!("{}", r.table());
            write_json(&out, &r)?;
            return Ok(r.all_pass());
        }
    }
    Ok(true)
}

fn train(
    config: &Path,
    data: &Path,
    out: &Path,
    resume: Option<&Path>,
    until: Option<usize>,
    exec: Execution,
) -> Result<()> {
    let data = SyntheticDataset::load(data)?;
    let (cfg, trainer, mut state) = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let (trainer, state) = ck.resume(&data, exec)?;
            (ck.config, trainer, state)
        }
        None => {
            let cfg = RunConfig::from_file(config)?;
            if cfg.dataset != data.spec {
                eprintln!("note: config dataset section differs from the dataset manifest; using the loaded data");
            }
            let (trainer, state) = Trainer::new(&cfg, &data, exec)?;
            (cfg, trainer, state)
        }
    };
    let until = until.unwrap_or(cfg.optimizer.total_steps);
    if until < state.step {
        bail!("checkpoint is already at step {}, past --until {until}", state.step);
    }
    let history = trainer.run_until(&mut state, until)?;

    fs::create_dir_all(out).map_err(|e| anyhow::anyhow!("creating {}: {e}", out.display()))?;
    write_jsonl(&out.join("metrics.jsonl"), &history)?;
    Checkpoint::new(&cfg, data.num_classes(), &state).save(&out.join("checkpoint.json"))?;
    if let (Some(first), Some(last)) = (history.first(), history.last()) {
        println!(
            "steps {}..={}: loss {:.4} -> {:.4}",
            first.step, last.step, first.loss_total, last.loss_total
        );
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.4}"))
}
