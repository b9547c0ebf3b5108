//! End-to-end acceptance gate. Each criterion prints one PASS/FAIL line and
//! the process exits non-zero if any criterion fails.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ecvt_core::eval::{evaluate, threshold_key, Labeled};
use ecvt_core::harness::ablation::run_ablation;
use ecvt_core::harness::checkpoint::Checkpoint;
use ecvt_core::harness::config::RunConfig;
use ecvt_core::harness::dataset::{generate_dataset, DatasetSpec, Split};
use ecvt_core::harness::io::write_jsonl;
use ecvt_core::harness::optim::OptimConfig;
use ecvt_core::harness::suite::{run_suite, Module, DEFAULT_SEEDS, TOLERANCE};
use ecvt_core::harness::train::Trainer;
use ecvt_core::head::ActionInstance;
use ecvt_core::losses::{
    giou_1d, loss_cal, loss_cls, loss_sem, match_events, similarity_nce, total_loss, total_loss_value, CalForm,
    LossParts, LossWeights,
};
use ecvt_core::numerics::{Tape, Tensor};
use ecvt_core::parallel::Execution;
use ecvt_core::prompt_oracle::{Edge, EventGraph, GraphNode, NodeKind, Relation};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, what: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(what.into())
    }
}

fn close(got: f64, want: f64, tol: f64, what: &str) -> Result<(), String> {
    check(
        (got - want).abs() <= tol,
        format!("{what}: got {got}, want {want} (tol {tol:e})"),
    )
}

fn gradient_integrity() -> Outcome {
    let start = Instant::now();
    let report = run_suite(Module::All, DEFAULT_SEEDS, Execution::Parallel).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    if let Some(c) = report.cases.iter().find(|c| !c.pass) {
        return Err(format!("{}/{} max rel error {:.3e}", c.module, c.case, c.max_rel_error));
    }
    check(elapsed < Duration::from_secs(60), format!("took {elapsed:?}"))?;
    Ok(format!(
        "{} cases x {} seeds, worst {:.2e} < {:.0e}, {:.1}s",
        report.cases.len(),
        DEFAULT_SEEDS,
        report.worst(),
        TOLERANCE,
        elapsed.as_secs_f64()
    ))
}

fn scalar(f: impl for<'t> FnOnce(&'t Tape) -> ecvt_core::Result<ecvt_core::numerics::Var<'t>>) -> Result<f64, String> {
    let tape = Tape::new();
    f(&tape).map(|v| v.item()).map_err(|e| e.to_string())
}

fn row(v: &[f64]) -> Tensor {
    Tensor::row(v.to_vec()).unwrap()
}

fn hand_derived_losses() -> Outcome {
    let mut n = 0;
    let mut expect = |got: Result<f64, String>, want: f64, tol: f64, what: &str| -> Result<(), String> {
        n += 1;
        close(got?, want, tol, what)
    };

    let giou = |a, b| giou_1d(a, b).map_err(|e| e.to_string());
    expect(giou((0.0, 1.0), (0.0, 1.0)), 1.0, 1e-9, "giou identical")?;
    expect(giou((0.0, 1.0), (2.0, 3.0)), -1.0 / 3.0, 1e-9, "giou disjoint")?;
    expect(giou((0.0, 2.0), (1.0, 3.0)), 1.0 / 3.0, 1e-9, "giou overlapping")?;

    expect(
        scalar(|t| loss_cls(t.constant(&Tensor::zeros(&[1, 4])), &[2])),
        4f64.ln(),
        1e-9,
        "cls uniform over 4",
    )?;
    expect(
        scalar(|t| loss_cls(t.constant(&row(&[0.0, 30.0, 0.0])), &[1])),
        0.0,
        1e-9,
        "cls confident prediction",
    )?;
    // Logits [0, ln 4] put p = 0.2 on class 0.
    expect(
        scalar(|t| loss_cls(t.constant(&row(&[0.0, 4f64.ln()])), &[0])),
        -(0.2f64.ln()),
        1e-9,
        "cls equals -ln p",
    )?;

    let e = std::f64::consts::E;
    expect(
        scalar(|t| loss_sem(t.constant(&row(&[3.0, 0.0])), &Tensor::identity(2), &[0], 1.0)),
        -(e / (e + 1.0)).ln(),
        1e-6,
        "sem one negative",
    )?;
    expect(
        scalar(|t| similarity_nce(t.constant(&Tensor::filled(&[3, 6], -0.2)), &[0, 3, 5], 0.07)),
        6f64.ln(),
        1e-6,
        "sem equal similarities",
    )?;
    let sims = [0.4, -0.1, 0.7, 0.2];
    let base = scalar(|t| similarity_nce(t.constant(&row(&sims)), &[2], 0.07))?;
    let shifted: Vec<f64> = sims.iter().map(|s| s + 0.25).collect();
    expect(
        scalar(|t| similarity_nce(t.constant(&row(&shifted)), &[2], 0.07)),
        base,
        1e-6,
        "sem shift invariance",
    )?;

    let graph = single_event_graph(1, (2.0, 6.0));
    let cal = |pred: [f64; 2]| {
        let b = row(&pred);
        let m = match_events(&graph, &[1], &b);
        if m.len() != 1 {
            return Err(format!("prediction {pred:?} was not matched"));
        }
        scalar(|t| loss_cal(t.constant(&b), &m, &graph, CalForm::SummedDeviation))
    };
    expect(cal([2.0, 6.0]), 0.0, 1e-9, "cal exact anchors")?;
    expect(cal([3.0, 5.0]), 0.0, 1e-9, "cal opposite deviations")?;
    expect(cal([3.0, 7.0]), 4.0, 1e-9, "cal equal deviations")?;

    let w = LossWeights::default();
    let tv = |p, w: &LossWeights| total_loss_value(p, w).map_err(|e| e.to_string());
    expect(tv([1.0; 4], &w), 2.7, 1e-9, "total default weights")?;
    let off = LossWeights {
        lambda_reg: 0.0,
        lambda_sem: 0.0,
        lambda_cal: 0.0,
        ..w
    };
    expect(tv([0.8, 2.0, 3.0, 4.0], &off), 0.8, 1e-9, "total with zero weights")?;
    expect(tv([0.0; 4], &w), 0.0, 1e-9, "total of zero parts")?;
    Ok(format!("{n} examples"))
}

fn single_event_graph(class_id: usize, anchor: (f64, f64)) -> EventGraph {
    let node = |node_id, kind, anchor| GraphNode {
        node_id,
        kind,
        class_id,
        anchor,
        embedding: row(&[1.0, 0.0]),
    };
    EventGraph {
        nodes: vec![node(0, NodeKind::Global, (0.0, 10.0)), node(1, NodeKind::Event, anchor)],
        edges: vec![Edge {
            src: 1,
            dst: 0,
            relation: Relation::PartOf,
        }],
    }
}

/// Interpolated AP written as a sum over hits: each true positive at rank
/// `k` contributes `1/G` times the best precision at any rank `≥ k`.
fn oracle_ap(preds: &[Labeled], gts: &[Labeled], thresh: f64) -> f64 {
    let mut ranked: Vec<&Labeled> = preds.iter().collect();
    ranked.sort_by(|a, b| b.instance.score.total_cmp(&a.instance.score));
    let mut taken = vec![false; gts.len()];
    let mut hit = Vec::new();
    for p in &ranked {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if taken[j] || g.video_id != p.video_id {
                continue;
            }
            let (a, b) = (p.instance.span(), g.instance.span());
            let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
            let iou = inter / (a.1 - a.0 + b.1 - b.0 - inter);
            let better = match best {
                None => iou >= thresh,
                Some((_, b)) => iou > b,
            };
            if better {
                best = Some((j, iou));
            }
        }
        let best = best.map(|(j, _)| j);
        if let Some(j) = best {
            taken[j] = true;
        }
        hit.push(best.is_some());
    }
    let prec: Vec<f64> = (0..hit.len())
        .map(|k| hit[..=k].iter().filter(|h| **h).count() as f64 / (k + 1) as f64)
        .collect();
    (0..hit.len())
        .filter(|&k| hit[k])
        .map(|k| prec[k..].iter().cloned().fold(0.0, f64::max))
        .sum::<f64>()
        / gts.len() as f64
}

fn oracle_map(preds: &[Labeled], gts: &[Labeled], thresh: f64) -> f64 {
    let mut classes: Vec<usize> = gts.iter().map(|g| g.instance.class_id).collect();
    classes.sort();
    classes.dedup();
    let of = |set: &[Labeled], c| {
        set.iter()
            .filter(|x| x.instance.class_id == c)
            .cloned()
            .collect::<Vec<_>>()
    };
    classes
        .iter()
        .map(|&c| oracle_ap(&of(preds, c), &of(gts, c), thresh))
        .sum::<f64>()
        / classes.len() as f64
}

fn random_instance(r: &mut ChaCha8Rng, videos: usize, class: usize, score: f64) -> Labeled {
    let start = r.random_range(0..8) as f64 * 0.5;
    let len = r.random_range(1..6) as f64 * 0.5;
    let video = format!("v{}", r.random_range(0..videos));
    Labeled::new(video, ActionInstance::new(class, start, start + len, score).unwrap())
}

fn map_oracle_equivalence() -> Outcome {
    let thresholds = [0.1, 0.3, 0.5, 0.7, 0.9];
    let mut worst: f64 = 0.0;
    let instances = 300;
    for seed in 0..instances {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let classes = r.random_range(1..=3);
        let videos = r.random_range(1..=2);
        let (mut preds, mut gts) = (Vec::new(), Vec::new());
        for c in 1..=classes {
            for _ in 0..r.random_range(1..=4) {
                gts.push(random_instance(&mut r, videos, c, 1.0));
            }
            for _ in 0..r.random_range(0..=6) {
                let score = r.random_range(0.01..1.0);
                preds.push(random_instance(&mut r, videos, c, score));
            }
        }
        let report = evaluate(&preds, &gts, &thresholds).map_err(|e| e.to_string())?;
        for &t in &thresholds {
            let got = report.per_threshold_map[&threshold_key(t)].ok_or("undefined mAP")?;
            let want = oracle_map(&preds, &gts, t);
            worst = worst.max((got - want).abs());
            close(got, want, 1e-9, &format!("instance {seed} at tIoU {t}"))?;
        }
    }
    Ok(format!(
        "{instances} instances x {} thresholds, max diff {worst:.1e}",
        thresholds.len()
    ))
}

fn overfit_convergence() -> Outcome {
    let start = Instant::now();
    let cfg = RunConfig::overfit();
    let data = generate_dataset(&cfg.dataset, cfg.seed).map_err(|e| e.to_string())?;
    let (trainer, mut state) = Trainer::new(&cfg, &data, Execution::Parallel).map_err(|e| e.to_string())?;
    let initial = trainer.dataset_loss(&state.store).map_err(|e| e.to_string())?;
    trainer
        .run_until(&mut state, cfg.optimizer.total_steps)
        .map_err(|e| e.to_string())?;
    let last = trainer.dataset_loss(&state.store).map_err(|e| e.to_string())?;
    let report = trainer
        .evaluate(&state.store, Split::Train)
        .map_err(|e| e.to_string())?;
    let map50 = report.map_at(0.5).unwrap_or(0.0);
    let ratio = last / initial;
    let summary = format!(
        "loss {initial:.3} -> {last:.4} (ratio {ratio:.3}), train mAP@0.5 {map50:.3}, {} steps, {:.0}s",
        state.step,
        start.elapsed().as_secs_f64()
    );
    check(state.step <= 500, format!("{} steps", state.step))?;
    check(ratio < 0.1 && map50 >= 0.9, summary.clone())?;
    Ok(summary)
}

fn ablation_direction() -> Outcome {
    let start = Instant::now();
    let report =
        run_ablation(&RunConfig::ablation(), &[0, 1, 2, 3, 4], Execution::Parallel).map_err(|e| e.to_string())?;
    for line in report.table().lines() {
        println!("    {line}");
    }
    let elapsed = start.elapsed();
    check(report.all_pass(), "an ordering is violated")?;
    check(elapsed < Duration::from_secs(30 * 60), format!("took {elapsed:?}"))?;
    let min_margin = report.checks.iter().map(|c| c.margin).fold(f64::INFINITY, f64::min);
    Ok(format!(
        "3 orderings hold, smallest margin {min_margin:+.3}, {:.0}s",
        elapsed.as_secs_f64()
    ))
}

fn small_run_config() -> RunConfig {
    RunConfig {
        dataset: DatasetSpec {
            num_videos: 8,
            num_classes: 3,
            ..DatasetSpec::default()
        },
        optimizer: OptimConfig {
            total_steps: 30,
            warmup_steps: 5,
            batch_size: 3,
            ..OptimConfig::default()
        },
        seed: 11,
        ..RunConfig::default()
    }
}

fn determinism_and_checkpointing() -> Outcome {
    let cfg = small_run_config();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run = |exec| -> Result<Vec<u8>, String> {
        let data = generate_dataset(&cfg.dataset, cfg.seed).map_err(|e| e.to_string())?;
        let (trainer, mut state) = Trainer::new(&cfg, &data, exec).map_err(|e| e.to_string())?;
        let history = trainer
            .run_until(&mut state, cfg.optimizer.total_steps)
            .map_err(|e| e.to_string())?;
        let path = dir.path().join(format!("{exec:?}.jsonl"));
        write_jsonl(&path, &history).map_err(|e| e.to_string())?;
        std::fs::read(&path).map_err(|e| e.to_string())
    };
    let a = run(Execution::Parallel)?;
    let b = run(Execution::Parallel)?;
    let c = run(Execution::Sequential)?;
    check(a == b && a == c, "metrics files differ between identical runs")?;

    let data = generate_dataset(&cfg.dataset, cfg.seed).map_err(|e| e.to_string())?;
    let (trainer, mut straight) = Trainer::new(&cfg, &data, Execution::Parallel).map_err(|e| e.to_string())?;
    let full = trainer.run_until(&mut straight, 30).map_err(|e| e.to_string())?;
    let (trainer, mut state) = Trainer::new(&cfg, &data, Execution::Parallel).map_err(|e| e.to_string())?;
    let mut resumed = trainer.run_until(&mut state, 13).map_err(|e| e.to_string())?;
    let path = dir.path().join("ck.json");
    Checkpoint::new(&cfg, data.num_classes(), &state)
        .save(&path)
        .map_err(|e| e.to_string())?;
    let ck = Checkpoint::load(&path).map_err(|e| e.to_string())?;
    let (trainer, mut state) = ck.resume(&data, Execution::Parallel).map_err(|e| e.to_string())?;
    resumed.extend(trainer.run_until(&mut state, 30).map_err(|e| e.to_string())?);
    let bits = |h: &[ecvt_core::harness::train::StepRecord]| -> Vec<[u64; 5]> {
        h.iter()
            .map(|r| [r.loss_total, r.loss_cls, r.loss_reg, r.loss_sem, r.loss_cal].map(f64::to_bits))
            .collect()
    };
    check(bits(&resumed) == bits(&full), "resumed loss sequence differs")?;
    check(state == straight, "resumed state differs")?;
    let first = ck.to_bytes().map_err(|e| e.to_string())?;
    check(
        std::fs::read(&path).map_err(|e| e.to_string())? == first,
        "save -> load -> save changed bytes",
    )?;
    Ok(format!(
        "{} byte metrics files identical x3, resume at 13 of 30 bitwise",
        a.len()
    ))
}

fn weighted_sum_exactness() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(2024);
    let draws = 2000;
    let mut worst: f64 = 0.0;
    for _ in 0..draws {
        let parts: [f64; 4] = std::array::from_fn(|_| r.random_range(0.0..50.0));
        let w = LossWeights {
            lambda_reg: r.random_range(0.0..5.0),
            lambda_sem: r.random_range(0.0..5.0),
            lambda_cal: r.random_range(0.0..5.0),
            ..LossWeights::default()
        };
        let mut want = parts[0];
        for (p, l) in parts[1..].iter().zip([w.lambda_reg, w.lambda_sem, w.lambda_cal]) {
            want += l * p;
        }
        let tape = Tape::new();
        let s = |v| tape.constant_owned(Tensor::scalar(v));
        let lp = LossParts {
            cls: s(parts[0]),
            reg: s(parts[1]),
            sem: s(parts[2]),
            cal: s(parts[3]),
        };
        let graph = total_loss(&lp, &w).map_err(|e| e.to_string())?.item();
        let value = total_loss_value(parts, &w).map_err(|e| e.to_string())?;
        for got in [graph, value] {
            worst = worst.max((got - want).abs());
            close(got, want, 1e-12, "weighted sum")?;
        }
    }
    Ok(format!("{draws} random draws, max diff {worst:.1e}"))
}

fn main() {
    let criteria: [Criterion; 7] = [
        ("gradient integrity", gradient_integrity),
        ("hand-derived loss values", hand_derived_losses),
        ("mAP oracle equivalence", map_oracle_equivalence),
        ("overfit convergence", overfit_convergence),
        ("ablation direction", ablation_direction),
        ("determinism and checkpointing", determinism_and_checkpointing),
        ("weighted-sum exactness", weighted_sum_exactness),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if !only.is_empty() && !only.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        match run() {
            Ok(detail) => println!("PASS {} {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {} {name}: {why}", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
