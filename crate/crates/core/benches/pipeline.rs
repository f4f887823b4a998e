//! Whole-pipeline runtime with the data-parallel core against the
//! single-threaded fallback.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rcbev::pipeline::{run_pipeline, PipelineConfig, RunOptions};
use rcbev::scene::{generate_scene, SceneSpec};

fn pipeline(c: &mut Criterion) {
    let scene = generate_scene(&SceneSpec { seed: 1, ..SceneSpec::default() }).unwrap();
    let cfg = PipelineConfig::default();
    let mut group = c.benchmark_group("pipeline");
    group.sample_size(10);
    for (name, sequential) in [("parallel", false), ("sequential", true)] {
        let opts = RunOptions {
            sequential,
            ..RunOptions::default()
        };
        group.bench_function(name, |b| b.iter(|| black_box(run_pipeline(&scene, &cfg, opts).unwrap())));
    }
    group.finish();
}

criterion_group!(benches, pipeline);
criterion_main!(benches);
