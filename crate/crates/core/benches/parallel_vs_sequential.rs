use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use flatlab::data::{generate, GeneratorKind, Split};
use flatlab::exec::Exec;
use flatlab::landscape::{sample_plane, surface, Normalization, SurfaceSpec};
use flatlab::models::{build_model, TaskShape};
use flatlab::objective::Supervised;
use flatlab::rng::{streams, RngStream};

fn surface_eval(c: &mut Criterion) {
    let data = Arc::new(generate(GeneratorKind::TwoMoons, 500, 0.2, 0).unwrap());
    let (model, center) =
        build_model(&"mlp[2-16-16-2]".parse().unwrap(), &TaskShape::of(&data), &RngStream::new(0, streams::INIT)).unwrap();
    let obj = Supervised::new(model, data, 32).unwrap();
    let pair = sample_plane(&center, &RngStream::new(0, streams::DIRECTIONS), Normalization::FilterWise).unwrap();
    let spec = SurfaceSpec { alpha_steps: 12, beta_steps: 12, splits: vec![Split::Train], ..Default::default() };

    let mut group = c.benchmark_group("surface_12x12");
    group.sample_size(20);
    for (name, exec) in [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)] {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| surface(&center, &pair, &spec, &obj, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, surface_eval);
criterion_main!(benches);
