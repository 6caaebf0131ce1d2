use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use xdiff_core::diagnostics::relative_entropy;
use xdiff_core::hypotheses::{check_h3, SimplexSampler};
use xdiff_core::mobility::g_matrix;
use xdiff_core::solver::{simulate_final, step, InitialData, SolverConfig};
use xdiff_core::{CrossDiffusionModel, ModelSpec};

fn mobility(c: &mut Criterion) {
    let mut group = c.benchmark_group("augmented_mobility");
    for m in ModelSpec::catalog() {
        let ac = SimplexSampler::new(m.n, 1e-3, 1).unwrap().sample(0);
        let comp = ac.composition();
        group.bench_with_input(BenchmarkId::from_parameter(&m.name), &m, |b, m| {
            b.iter(|| {
                let bm = m.augmented_mobility(black_box(&comp));
                g_matrix(&bm, &ac).unwrap()
            })
        });
    }
    group.finish();
}

fn solver(c: &mut Criterion) {
    let mut group = c.benchmark_group("implicit_step");
    group.sample_size(20);
    for name in ["scalar", "maxwell_stefan"] {
        let m = ModelSpec::preset(name).unwrap();
        for cells in [64, 256] {
            let cfg = SolverConfig::new(1e-3, 1e-3, 1e-6, cells, 1.0);
            let init = InitialData::default_for(m.n).build(cfg.grid()).unwrap();
            group.bench_with_input(BenchmarkId::new(name, cells), &init, |b, init| {
                b.iter(|| step(&m, black_box(init), &cfg).unwrap())
            });
        }
    }
    group.finish();
}

fn diagnostics(c: &mut Criterion) {
    let m = ModelSpec::preset("tumor").unwrap();
    let cfg = SolverConfig::new(1e-3, 2e-2, 1e-6, 256, 1.0);
    let u = InitialData::default_for(m.n).build(cfg.grid()).unwrap();
    let (v, _) = simulate_final(&m, &u, &cfg).unwrap();
    c.bench_function("relative_entropy/256", |b| {
        b.iter(|| relative_entropy(black_box(&u), &v).unwrap())
    });

    let mut group = c.benchmark_group("check_h3");
    group.sample_size(10);
    for m in [
        ModelSpec::preset("maxwell_stefan").unwrap(),
        ModelSpec::preset("ion_channel").unwrap(),
    ] {
        group.bench_function(BenchmarkId::from_parameter(&m.name), |b| {
            b.iter(|| check_h3(&m, 1_000, 42).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, mobility, solver, diagnostics);
criterion_main!(benches);
