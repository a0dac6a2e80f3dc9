//! Learn explicit large time-step integration schemes for ergodic SDEs from
//! data produced by a fine-step implicit solver, and validate them against
//! invariant-measure and correlation statistics.
//!
//! The pipeline, end to end:
//!
//! 1. [`datagen`] solves the SDE with split-step backward Euler at a fine
//!    step `dt`, downsamples states to `delta = gap * dt` and accumulates the
//!    coarse Brownian increments over each gap window.
//! 2. [`basis`] evaluates scheme-informed basis functions (the state, a
//!    drift-derived term taken from a numerical scheme, and the scaled noise
//!    `sigma * xi / delta`).
//! 3. [`inference`] builds per-coordinate normal equations from a dataset,
//!    solves the least-squares problem by truncated-SVD pseudo-inverse and
//!    estimates the residual scale `sigma_eta` of the fitted scheme.
//! 4. [`sim`] runs the resulting [`inference::InferredScheme`] as an explicit
//!    integrator at the coarse step.
//! 5. [`stats`] compares simulated trajectories against reference data via
//!    empirical marginal densities, total variation distance, temporal
//!    correlations and blow-up scans.
//!
//! Shared domain types ([`sde::SdeSystem`], [`datagen::TrajectoryDataset`],
//! [`basis::BasisFamily`], [`inference::InferredScheme`]) are re-exported at
//! the crate root.

pub mod basis;
pub mod datagen;
pub mod inference;
pub mod integrators;
pub mod rng;
pub mod sde;
pub mod sim;
pub mod stats;

pub use basis::{BasisError, BasisFamily, FamilyKind};
pub use datagen::{DatagenError, GenerationConfig, LongTrajectory, TrajectoryDataset};
pub use inference::{
    ConvergenceReport, InferenceError, InferredScheme, NormalEquations, ResidualOrderReport,
};
pub use integrators::{ImplicitSolverOptions, SchemeKind, StepError};
pub use sde::{make_benchmark, BenchmarkId, SdeError, SdeSystem, SystemSpec};
pub use sim::{SimConfig, SimError, SimOutput};
pub use stats::{AcfCurve, BlowupTable, Histogram, StatsError};
