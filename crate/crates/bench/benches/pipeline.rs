use std::hint::black_box;
use std::time::Duration;

use criterion::{criterion_group, criterion_main, Criterion};

use cimark::distortions::DistortionSpec;
use cimark::rng::seeded_rng;
use cimark::training::Trainer;
use cimark::{GuidanceSignals, Model, RunConfig};
use cimark_bench::batch;

fn embed_extract(c: &mut Criterion) {
    let cfg = RunConfig::desk();
    let model = Model::new(&cfg).unwrap();
    let params = model.init_params::<f32>();
    let (images, messages) = batch(8, 64, cfg.message_length);
    let guidance = GuidanceSignals::zeros();
    let mut group = c.benchmark_group("inference");
    group.sample_size(10);
    group.bench_function("embed 8x64x64", |b| {
        b.iter(|| black_box(model.embed(&params, &images, &messages, &guidance).unwrap()))
    });
    group.bench_function("extract 8x64x64", |b| {
        b.iter(|| black_box(model.extract(&params, &images, &guidance).unwrap()))
    });
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let cfg = RunConfig::desk();
    let (images, messages) = batch(cfg.batch_size, 64, cfg.message_length);
    let specs = vec![DistortionSpec::IDENTITY; cfg.batch_size];
    let mut trainer = Trainer::new(&cfg).unwrap();
    let mut rng = seeded_rng(4);
    let mut group = c.benchmark_group("training");
    group.sample_size(10).measurement_time(Duration::from_secs(20));
    group.bench_function("desk step (batch 8, 64x64, 32 bits)", |b| {
        b.iter(|| black_box(trainer.train_step_with(&images, &messages, &specs, &mut rng).unwrap()))
    });
    group.finish();
}

criterion_group!(benches, embed_extract, train_step);
criterion_main!(benches);
