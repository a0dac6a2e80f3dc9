//! Per-step kernel throughput: one-step maps and basis evaluation on the
//! Lorenz system (the highest-dimensional benchmark).

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use isalt_bench::lorenz;
use isalt_core::basis::{phi1_ssbe, BasisFamily, FamilyKind};
use isalt_core::integrators::{
    em_step, hrk4_step, ssbe_step, ImplicitSolverOptions,
};
use nalgebra::DVector;

fn bench_steps(c: &mut Criterion) {
    let system = lorenz();
    let x = DVector::from_column_slice(&[3.0, 4.0, 20.0]);
    let db = DVector::from_column_slice(&[0.01, -0.02]);
    let delta = 5e-4;
    let opts = ImplicitSolverOptions::default();

    let mut group = c.benchmark_group("step");
    group.bench_function("em", |b| {
        b.iter(|| em_step(&system, black_box(&x), black_box(&db), delta))
    });
    group.bench_function("hrk4", |b| {
        b.iter(|| hrk4_step(&system, black_box(&x), black_box(&db), delta))
    });
    group.bench_function("ssbe", |b| {
        b.iter(|| ssbe_step(&system, black_box(&x), black_box(&db), delta, &opts).unwrap())
    });
    group.finish();
}

fn bench_basis(c: &mut Criterion) {
    let system = lorenz();
    let x = DVector::from_column_slice(&[3.0, 4.0, 20.0]);
    let xi = DVector::from_column_slice(&[0.05, -0.03]);
    let delta = 0.02;

    let mut group = c.benchmark_group("basis");
    for family in FamilyKind::ALL {
        let fam = BasisFamily::new(family, true, delta, system.clone()).unwrap();
        group.bench_function(family.label(), |b| {
            b.iter(|| fam.eval(black_box(&x), black_box(&xi)).unwrap())
        });
    }
    group.bench_function("phi1-ssbe-solve", |b| {
        b.iter(|| phi1_ssbe(&system, black_box(&x), delta).unwrap())
    });
    group.finish();
}

criterion_group!(benches, bench_steps, bench_basis);
criterion_main!(benches);
