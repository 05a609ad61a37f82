use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use motionmap::config::RunConfig;
use motionmap::data::{generate_synthetic_corpus, mine_multimodal_gt, window_corpus};
use motionmap::kinematics::{motion_transfer, pose_to_spherical, SkeletonTopology};

fn data(c: &mut Criterion) {
    let cfg = RunConfig::smoke();
    let topo = SkeletonTopology::human17();
    let corpus = generate_synthetic_corpus(&cfg.generator, cfg.seed).unwrap();
    let samples = window_corpus(&corpus, &cfg.window).unwrap();
    let (a, b) = (&samples[0], &samples[samples.len() - 1]);

    c.bench_function("pose_to_spherical", |bench| {
        bench.iter(|| pose_to_spherical(black_box(a.x.last_frame()), &topo))
    });
    c.bench_function("motion_transfer", |bench| {
        bench.iter(|| motion_transfer(black_box(&a.x), black_box(&b.y), &topo).unwrap())
    });
    c.bench_function("mine_multimodal_gt", |bench| {
        bench.iter(|| mine_multimodal_gt(black_box(&samples), &topo, cfg.mining.threshold).unwrap())
    });
}

criterion_group!(benches, data);
criterion_main!(benches);
