use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ctdl_bench::dataset;
use ctdl_core::baselines::extrapolate_sinogram;
use ctdl_core::projector::{back_project, fbp, forward_project};
use std::hint::black_box;

fn projector(c: &mut Criterion) {
    let mut group = c.benchmark_group("projector");
    group.sample_size(10);
    for (nx, scale) in [(64, 0.125), (128, 0.25)] {
        let s = &dataset(nx, scale, 1).samples[0];
        let id = format!("{nx}px_{}x{}", s.y.geom.n_views, s.y.geom.n_dets);
        group.bench_with_input(BenchmarkId::new("forward", &id), s, |b, s| {
            b.iter(|| forward_project(black_box(&s.f), &s.y.geom).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("back", &id), s, |b, s| {
            b.iter(|| back_project(black_box(&s.y), &s.f.grid).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("fbp", &id), s, |b, s| b.iter(|| fbp(black_box(&s.p), &s.f.grid).unwrap()));
        group.bench_with_input(BenchmarkId::new("extrapolate", &id), s, |b, s| {
            b.iter(|| extrapolate_sinogram(black_box(&s.p), &s.truncation).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, projector);
criterion_main!(benches);
