//! Shared fixtures for the criterion benchmarks.

use isalt_core::datagen::{
    generate_dataset, generate_long_trajectory, sample_initial_conditions, GenerationConfig,
    TrajectoryDataset,
};
use isalt_core::integrators::ImplicitSolverOptions;
use isalt_core::sde::{make_benchmark, BenchmarkId, SdeSystem};

/// A small double-well dataset sized for estimation benchmarks.
pub fn double_well_dataset(gap: usize, trajectories: usize, fine_steps: usize) -> TrajectoryDataset {
    let system = make_benchmark(BenchmarkId::DoubleWell1D);
    let long = generate_long_trajectory(
        &system,
        &system.default_x0(),
        1e-3,
        10_000,
        3,
        &ImplicitSolverOptions::default(),
    )
    .unwrap();
    let initials = sample_initial_conditions(&long, trajectories, 1_000, 5).unwrap();
    let cfg = GenerationConfig::new(system, 1e-3, fine_steps, gap, trajectories, 9);
    generate_dataset(&cfg, &initials).unwrap()
}

pub fn lorenz() -> SdeSystem {
    make_benchmark(BenchmarkId::Lorenz3D)
}
