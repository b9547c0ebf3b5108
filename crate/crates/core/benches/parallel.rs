use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use ecvt_core::harness::config::RunConfig;
use ecvt_core::harness::dataset::{generate_dataset_with, DatasetSpec, Split};
use ecvt_core::harness::train::Trainer;
use ecvt_core::parallel::{self, Execution};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn config() -> RunConfig {
    let mut cfg = RunConfig {
        dataset: DatasetSpec {
            num_videos: 16,
            val_fraction: 0.5,
            ..DatasetSpec::default()
        },
        ..RunConfig::default()
    };
    cfg.optimizer.batch_size = 8;
    cfg
}

fn train_step(c: &mut Criterion) {
    let cfg = config();
    let data = generate_dataset_with(Execution::Sequential, &cfg.dataset, 0).unwrap();
    let mut group = c.benchmark_group("train_step");
    group.sample_size(20);
    for (name, exec) in MODES {
        let (trainer, state) = Trainer::new(&cfg, &data, exec).unwrap();
        group.bench_function(BenchmarkId::new(name, cfg.optimizer.batch_size), |b| {
            b.iter_batched(
                || state.clone(),
                |mut s| black_box(trainer.step(&mut s).unwrap()),
                criterion::BatchSize::SmallInput,
            )
        });
    }
    group.finish();
}

fn evaluation(c: &mut Criterion) {
    let cfg = config();
    let data = generate_dataset_with(Execution::Sequential, &cfg.dataset, 0).unwrap();
    let mut group = c.benchmark_group("evaluate_val");
    group.sample_size(20);
    for (name, exec) in MODES {
        let (trainer, state) = Trainer::new(&cfg, &data, exec).unwrap();
        group.bench_function(name, |b| {
            b.iter(|| black_box(trainer.evaluate(&state.store, Split::Val).unwrap()))
        });
    }
    group.finish();
}

fn dataset_generation(c: &mut Criterion) {
    let spec = DatasetSpec {
        num_videos: 64,
        ..DatasetSpec::default()
    };
    let mut group = c.benchmark_group("generate_dataset");
    group.sample_size(20);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::new(name, spec.num_videos), &spec, |b, spec| {
            b.iter(|| black_box(generate_dataset_with(exec, spec, 7).unwrap()))
        });
    }
    group.finish();
}

fn report_threads(_: &mut Criterion) {
    eprintln!("rayon threads: {}", parallel::threads());
}

criterion_group!(benches, report_threads, train_step, evaluation, dataset_generation);
criterion_main!(benches);
