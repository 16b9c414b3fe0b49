//! Sequential against rayon execution for the data-parallel stages:
//! dataset generation, feature encoding and sharded evaluation.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use framedistill::par::Execution;
use framedistill::synth::generate;
use framedistill::train::{evaluate, EvalMode, Model, Prepared, Stage, TrainConfig};

fn config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.data.num_train = 200;
    cfg.data.num_val = 200;
    cfg
}

fn modes() -> [(&'static str, Execution); 2] {
    [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)]
}

fn bench_generate(c: &mut Criterion) {
    let cfg = config();
    let mut group = c.benchmark_group("generate");
    group.sample_size(10);
    for (name, exec) in modes() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| generate(&cfg.data, exec).unwrap())
        });
    }
    group.finish();
}

fn bench_encode(c: &mut Criterion) {
    let cfg = config();
    let data = generate(&cfg.data, Execution::default()).unwrap();
    let encoder = Model::new(&cfg).unwrap().encoder;
    let mut group = c.benchmark_group("encode");
    group.sample_size(10);
    for (name, exec) in modes() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| Prepared::new(data.clone(), &encoder, exec).unwrap())
        });
    }
    group.finish();
}

fn bench_evaluate(c: &mut Criterion) {
    let cfg = config();
    let model = Model::new(&cfg).unwrap();
    let data = Prepared::new(generate(&cfg.data, Execution::default()).unwrap(), &model.encoder, Execution::default()).unwrap();
    let mut group = c.benchmark_group("evaluate_student");
    group.sample_size(10);
    for (name, exec) in modes() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| evaluate(&model, Stage::Student, &data, EvalMode::Hard, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_generate, bench_encode, bench_evaluate);
criterion_main!(benches);
