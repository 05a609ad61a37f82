use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use motionmap::embedding::HeatmapCell;
use motionmap::motionmap::extract_maxima;
use motionmap_bench::trained_fixture;

fn inference(c: &mut Criterion) {
    let f = trained_fixture();
    let x = &f.data.samples[0].x;
    let hm = f.model.motionmap(x).unwrap();
    let m = f.model.grid_size();
    let budget = f.config.evaluate.budget;

    c.bench_function("motionmap", |b| b.iter(|| f.model.motionmap(black_box(x)).unwrap()));
    c.bench_function("extract_maxima", |b| {
        b.iter(|| extract_maxima(black_box(&hm), &f.model.inference.maxima))
    });
    c.bench_function("forecast_at_cell", |b| {
        b.iter(|| f.model.forecast_at_cell(black_box(x), HeatmapCell::new(m / 2, m / 2)).unwrap())
    });
    c.bench_function("ranked_forecast", |b| {
        b.iter(|| f.model.forecast(black_box(x), budget).unwrap())
    });
}

criterion_group!(benches, inference);
criterion_main!(benches);
