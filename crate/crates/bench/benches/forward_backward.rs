use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use gridformer_bench::Fixture;
use gridformer_core::grid::{regrid_dataset, GridSpec, SynthSpec, generate_synthetic, Family};
use std::hint::black_box;

fn model(c: &mut Criterion) {
    let mut group = c.benchmark_group("desk_model");
    group.sample_size(10);
    for nvars in [2, 5] {
        let fx = Fixture::desk(nvars, 4);
        group.bench_with_input(BenchmarkId::new("forward", nvars), &fx, |b, fx| {
            b.iter(|| black_box(fx.step(false).unwrap()))
        });
        group.bench_with_input(BenchmarkId::new("forward_backward", nvars), &fx, |b, fx| {
            b.iter(|| black_box(fx.step(true).unwrap()))
        });
    }
    group.finish();
}

fn regrid(c: &mut Criterion) {
    let spec = SynthSpec {
        height: 32,
        width: 64,
        variables: vec!["a".into(), "b".into()],
        static_variables: vec![],
        step_hours: 6,
        steps: 8,
        start_hour: 0,
        family: Family::default(),
    };
    let ds = generate_synthetic(&spec, 0).unwrap();
    let dst = GridSpec::equiangular(16, 32);
    c.bench_function("regrid_32x64_to_16x32", |b| b.iter(|| black_box(regrid_dataset(&ds, &dst).unwrap())));
}

criterion_group!(benches, model, regrid);
criterion_main!(benches);
