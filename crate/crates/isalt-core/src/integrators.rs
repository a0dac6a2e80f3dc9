//! One-step maps and flow maps for the three reference schemes.
//!
//! With state `x`, Brownian increment `db ~ N(0, delta I_m)` and step `delta`:
//!
//! - EM:   `x' = x + f(x) delta + sigma db`
//! - HRK4: `x' = x + phi1(x, sigma db) delta + sigma db`, where `phi1` is a
//!   four-stage Runge-Kutta average with the scaled noise `sigma db / delta`
//!   added to every stage as constant forcing. Note that the noise therefore
//!   enters the step twice (once through `phi1 delta`, once directly); with
//!   `f = 0` the step is `x + 2 sigma db`. This is intentional and is exactly
//!   what the parametric families later calibrate away.
//! - SSBE: `x' = x* + sigma db` with the implicit drift substep
//!   `x* = x + f(x*) delta`, solved by Newton-Raphson.
//!
//! The flow map of a scheme is `(step(x, db, delta) - x) / delta`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sde::SdeSystem;

/// Condition-estimate limit above which a Newton matrix is reported singular.
pub const SINGULAR_COND_LIMIT: f64 = 1e14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeKind {
    Em,
    Hrk4,
    Ssbe,
}

impl SchemeKind {
    pub fn label(&self) -> &'static str {
        match self {
            SchemeKind::Em => "em",
            SchemeKind::Hrk4 => "hrk4",
            SchemeKind::Ssbe => "ssbe",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ImplicitMethod {
    NewtonRaphson,
}

/// Options for the SSBE implicit solve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImplicitSolverOptions {
    /// Absolute tolerance on the implicit residual `|x* - x - f(x*) delta|`
    /// and on the Newton step norm.
    pub tolerance: f64,
    pub max_iterations: usize,
    pub method: ImplicitMethod,
}

impl Default for ImplicitSolverOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-10,
            max_iterations: 100,
            method: ImplicitMethod::NewtonRaphson,
        }
    }
}

impl ImplicitSolverOptions {
    pub fn validate(&self) -> Result<(), StepError> {
        if !(self.tolerance > 0.0) || self.max_iterations == 0 {
            return Err(StepError::InvalidOptions);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum StepError {
    /// The Newton iteration hit the cap without meeting the tolerance.
    /// Callers treat this as a blow-up at the offending step.
    #[error("implicit solve did not converge within {iterations} iterations")]
    NonConvergence { iterations: usize },
    #[error("newton matrix (I - delta grad f) is numerically singular (cond est {cond:.3e})")]
    SingularNewtonMatrix { cond: f64 },
    #[error("implicit solver options are invalid (tolerance <= 0 or zero iterations)")]
    InvalidOptions,
}

/// Euler-Maruyama step `x + f(x) delta + sigma db`. Non-finite results are
/// returned as-is; blow-up policing is the caller's job.
pub fn em_step(system: &SdeSystem, x: &DVector<f64>, db: &DVector<f64>, delta: f64) -> DVector<f64> {
    x + system.drift(x) * delta + system.diffusion() * db
}

/// The four-stage RK4 average with `forcing / delta` added to every stage.
/// `forcing` must already be multiplied by the diffusion, i.e. `sigma db`.
pub fn hrk4_phi1(
    system: &SdeSystem,
    x: &DVector<f64>,
    forcing: &DVector<f64>,
    delta: f64,
) -> DVector<f64> {
    let w = forcing / delta;
    let k1 = system.drift(x) + &w;
    let k2 = system.drift(&(x + &k1 * (delta / 2.0))) + &w;
    let k3 = system.drift(&(x + &k2 * (delta / 2.0))) + &w;
    let k4 = system.drift(&(x + &k3 * delta)) + &w;
    (k1 + k2 * 2.0 + k3 * 2.0 + k4) / 6.0
}

/// Hybrid RK4 step `x + phi1(x, sigma db) delta + sigma db`.
pub fn hrk4_step(
    system: &SdeSystem,
    x: &DVector<f64>,
    db: &DVector<f64>,
    delta: f64,
) -> DVector<f64> {
    let forcing = system.diffusion() * db;
    x + hrk4_phi1(system, x, &forcing, delta) * delta + forcing
}

fn all_finite(v: &DVector<f64>) -> bool {
    v.iter().all(|c| c.is_finite())
}

/// Rough condition estimate of an LU factorization: the ratio of the largest
/// to the smallest absolute diagonal entry of U. A cheap lower bound, used
/// only to detect effectively singular Newton matrices.
pub(crate) fn lu_condition_estimate(
    lu: &nalgebra::linalg::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
) -> f64 {
    let u = lu.u();
    let mut max_d = 0.0_f64;
    let mut min_d = f64::INFINITY;
    for i in 0..u.nrows().min(u.ncols()) {
        let a = u[(i, i)].abs();
        max_d = max_d.max(a);
        min_d = min_d.min(a);
    }
    if min_d == 0.0 || !min_d.is_finite() {
        f64::INFINITY
    } else {
        max_d / min_d
    }
}

/// Solves the implicit drift substep `x* = x + f(x*) delta` by Newton
/// iteration: `(I - delta grad f(y)) step = x + delta f(y) - y`. Converged
/// when the residual norm is at most `opts.tolerance`.
pub fn ssbe_drift_substep(
    system: &SdeSystem,
    x: &DVector<f64>,
    delta: f64,
    opts: &ImplicitSolverOptions,
) -> Result<DVector<f64>, StepError> {
    opts.validate()?;
    let d = system.dim();
    let identity = DMatrix::<f64>::identity(d, d);
    let mut y = x.clone();
    for iteration in 0..=opts.max_iterations {
        if !all_finite(&y) {
            return Err(StepError::NonConvergence { iterations: iteration });
        }
        let residual = x + system.drift(&y) * delta - &y;
        if !all_finite(&residual) {
            return Err(StepError::NonConvergence { iterations: iteration });
        }
        if residual.norm() <= opts.tolerance {
            return Ok(y);
        }
        if iteration == opts.max_iterations {
            break;
        }
        let newton_matrix = &identity - system.drift_jacobian(&y) * delta;
        let lu = newton_matrix.lu();
        let cond = lu_condition_estimate(&lu);
        if cond > SINGULAR_COND_LIMIT {
            return Err(StepError::SingularNewtonMatrix { cond });
        }
        let step = lu
            .solve(&residual)
            .ok_or(StepError::SingularNewtonMatrix { cond: f64::INFINITY })?;
        y += step;
    }
    Err(StepError::NonConvergence {
        iterations: opts.max_iterations,
    })
}

/// Split-step backward Euler: implicit drift substep, then add the noise.
pub fn ssbe_step(
    system: &SdeSystem,
    x: &DVector<f64>,
    db: &DVector<f64>,
    delta: f64,
    opts: &ImplicitSolverOptions,
) -> Result<DVector<f64>, StepError> {
    let star = ssbe_drift_substep(system, x, delta, opts)?;
    Ok(star + system.diffusion() * db)
}

/// One step of the requested scheme.
pub fn scheme_step(
    kind: SchemeKind,
    system: &SdeSystem,
    x: &DVector<f64>,
    db: &DVector<f64>,
    delta: f64,
    opts: &ImplicitSolverOptions,
) -> Result<DVector<f64>, StepError> {
    match kind {
        SchemeKind::Em => Ok(em_step(system, x, db, delta)),
        SchemeKind::Hrk4 => Ok(hrk4_step(system, x, db, delta)),
        SchemeKind::Ssbe => ssbe_step(system, x, db, delta, opts),
    }
}

/// The scheme's flow map `(step(x, db, delta) - x) / delta`.
pub fn flow_map(
    kind: SchemeKind,
    system: &SdeSystem,
    x: &DVector<f64>,
    db: &DVector<f64>,
    delta: f64,
    opts: &ImplicitSolverOptions,
) -> Result<DVector<f64>, StepError> {
    Ok((scheme_step(kind, system, x, db, delta, opts)? - x) / delta)
}
