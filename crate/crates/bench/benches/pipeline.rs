use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use slipfit::fitting::{fit_model, project_raw};
use slipfit::models::eval_raw;
use slipfit::{classify, BaseArticulation, Config, ModelId, OrientationMode};
use slipfit_bench::fixture;

fn constraint_eval(c: &mut Criterion) {
    let id = ModelId::new(BaseArticulation::Axial, OrientationMode::Rigid);
    let (demo, truth) = fixture(id, 1);
    let alpha: Vec<f64> = truth.alpha.to_vector(id).unwrap().iter().copied().collect();
    c.bench_function("eval axial.rigid x500", |b| {
        b.iter(|| {
            for p in &demo.poses {
                black_box(eval_raw(id, &alpha, p));
            }
        })
    });
}

fn projection(c: &mut Criterion) {
    let cfg = Config::default();
    let id = ModelId::new(BaseArticulation::Prismatic, OrientationMode::Slip);
    let (demo, truth) = fixture(id, 2);
    let alpha: Vec<f64> = truth.alpha.to_vector(id).unwrap().iter().copied().collect();
    c.bench_function("project prismatic.slip x500", |b| {
        b.iter(|| {
            for p in &demo.poses {
                black_box(project_raw(id, &alpha, p, &cfg.solver));
            }
        })
    });
}

fn fitting(c: &mut Criterion) {
    let cfg = Config::default();
    let mut group = c.benchmark_group("fit");
    group.sample_size(10);
    for id in [
        ModelId::new(BaseArticulation::Axial, OrientationMode::Free),
        ModelId::new(BaseArticulation::Axial, OrientationMode::Slip),
        ModelId::new(BaseArticulation::Planar, OrientationMode::Rigid),
    ] {
        let (demo, _) = fixture(id, 3);
        group.bench_function(id.to_string(), |b| b.iter(|| black_box(fit_model(id, &demo, &cfg.solver))));
    }
    group.finish();
}

fn end_to_end(c: &mut Criterion) {
    let cfg = Config::default();
    let (demo, _) = fixture(ModelId::new(BaseArticulation::Axial, OrientationMode::Slip), 4);
    let mut group = c.benchmark_group("classify");
    group.sample_size(10);
    group.bench_function("axial.slip", |b| b.iter(|| black_box(classify(&demo, &cfg))));
    group.finish();
}

criterion_group!(benches, constraint_eval, projection, fitting, end_to_end);
criterion_main!(benches);
