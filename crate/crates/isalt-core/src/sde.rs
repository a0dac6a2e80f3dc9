//! SDE model abstraction and benchmark systems.
//!
//! A system is `dX_t = f(X_t) dt + sigma dB_t` with locally Lipschitz drift
//! `f`, a constant `d x m` diffusion matrix of full column rank (`m <= d`;
//! degenerate noise when `m < d`), and optionally a potential `V` with
//! `f = -grad V` for gradient systems, which yields the analytic invariant
//! density `exp(-beta V) / Z`.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type DriftFn = dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync;
pub type JacobianFn = dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync;
pub type PotentialFn = dyn Fn(&DVector<f64>) -> f64 + Send + Sync;

#[derive(Debug, Error)]
pub enum SdeError {
    #[error("diffusion must be {d}x{m} for state dimension {d} and noise dimension {m}")]
    DiffusionShape { d: usize, m: usize },
    #[error("noise dimension m={m} exceeds state dimension d={d}")]
    NoiseDimension { d: usize, m: usize },
    #[error("diffusion columns are linearly dependent (rank {rank} < m = {m})")]
    RankDeficientDiffusion { rank: usize, m: usize },
    #[error("system `{0}` has no analytic invariant density (no potential)")]
    NoAnalyticDensity(String),
    #[error("inverse temperature beta must be positive, got {0}")]
    InvalidBeta(f64),
    #[error("state dimension must be at least 1")]
    ZeroDimension,
    #[error("drift/jacobian/potential consistency check failed: {0}")]
    ConsistencyCheck(String),
    #[error("cannot reconstruct a system from spec `{0}`; supply it programmatically")]
    UnresolvableSpec(String),
    #[error("linear system matrix must be square {d}x{d}, got {rows}x{cols}")]
    LinearShape { d: usize, rows: usize, cols: usize },
}

struct Inner {
    name: String,
    d: usize,
    m: usize,
    drift: Arc<DriftFn>,
    jacobian: Box<JacobianFn>,
    jacobian_is_fd: bool,
    diffusion: DMatrix<f64>,
    beta: f64,
    potential: Option<Box<PotentialFn>>,
    x0: DVector<f64>,
}

/// An SDE model `dX = f(X) dt + sigma dB`. Immutable after construction and
/// cheap to clone; safe to share across worker threads.
#[derive(Clone)]
pub struct SdeSystem {
    inner: Arc<Inner>,
}

impl fmt::Debug for SdeSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SdeSystem")
            .field("name", &self.inner.name)
            .field("d", &self.inner.d)
            .field("m", &self.inner.m)
            .field("beta", &self.inner.beta)
            .field("has_potential", &self.inner.potential.is_some())
            .finish()
    }
}

impl SdeSystem {
    pub fn builder(name: impl Into<String>, d: usize, m: usize) -> SdeSystemBuilder {
        SdeSystemBuilder {
            name: name.into(),
            d,
            m,
            drift: None,
            jacobian: None,
            diffusion: None,
            beta: 1.0,
            potential: None,
            x0: None,
        }
    }

    pub fn name(&self) -> &str {
        &self.inner.name
    }

    /// State dimension d.
    pub fn dim(&self) -> usize {
        self.inner.d
    }

    /// Noise dimension m (number of Brownian channels).
    pub fn noise_dim(&self) -> usize {
        self.inner.m
    }

    pub fn beta(&self) -> f64 {
        self.inner.beta
    }

    /// The constant d x m diffusion matrix sigma.
    pub fn diffusion(&self) -> &DMatrix<f64> {
        &self.inner.diffusion
    }

    /// Drift f(x). A non-finite result signals state blow-up to callers.
    pub fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.inner.drift)(x)
    }

    /// Jacobian of the drift at x.
    pub fn drift_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        (self.inner.jacobian)(x)
    }

    /// True when the Jacobian is a finite-difference fallback rather than an
    /// analytic expression.
    pub fn jacobian_is_finite_difference(&self) -> bool {
        self.inner.jacobian_is_fd
    }

    pub fn has_potential(&self) -> bool {
        self.inner.potential.is_some()
    }

    pub fn potential(&self, x: &DVector<f64>) -> Option<f64> {
        self.inner.potential.as_ref().map(|v| v(x))
    }

    /// Unnormalized stationary density `exp(-beta V(x))` for gradient
    /// systems; errors when the system carries no potential.
    pub fn stationary_density_unnormalized(&self, x: &DVector<f64>) -> Result<f64, SdeError> {
        match &self.inner.potential {
            Some(v) => Ok((-self.inner.beta * v(x)).exp()),
            None => Err(SdeError::NoAnalyticDensity(self.inner.name.clone())),
        }
    }

    /// Default initial state used by data generation when none is supplied.
    pub fn default_x0(&self) -> DVector<f64> {
        self.inner.x0.clone()
    }

    /// Verifies at the given points that the Jacobian matches a central
    /// finite-difference Jacobian of the drift, and (when a potential is
    /// present) that `drift = -grad V`, both to relative tolerance 1e-6.
    pub fn check_consistency(&self, points: &[DVector<f64>]) -> Result<(), SdeError> {
        const REL_TOL: f64 = 1e-6;
        for x in points {
            let jac = self.drift_jacobian(x);
            let fd = finite_difference_jacobian(&*self.inner.drift, x);
            let scale = jac.amax().max(1.0);
            let err = (&jac - &fd).amax();
            if err > REL_TOL * scale {
                return Err(SdeError::ConsistencyCheck(format!(
                    "jacobian mismatch {err:.3e} (scale {scale:.3e}) at {x:?}"
                )));
            }
            if let Some(v) = &self.inner.potential {
                let grad = finite_difference_gradient(&**v, x);
                let f = self.drift(x);
                let scale = f.amax().max(1.0);
                let err = (&f + &grad).amax();
                if err > REL_TOL * scale {
                    return Err(SdeError::ConsistencyCheck(format!(
                        "drift is not -grad(potential): mismatch {err:.3e} at {x:?}"
                    )));
                }
            }
        }
        Ok(())
    }
}

pub struct SdeSystemBuilder {
    name: String,
    d: usize,
    m: usize,
    drift: Option<Box<DriftFn>>,
    jacobian: Option<Box<JacobianFn>>,
    diffusion: Option<DMatrix<f64>>,
    beta: f64,
    potential: Option<Box<PotentialFn>>,
    x0: Option<DVector<f64>>,
}

impl SdeSystemBuilder {
    pub fn drift(mut self, f: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static) -> Self {
        self.drift = Some(Box::new(f));
        self
    }

    pub fn jacobian(
        mut self,
        j: impl Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        self.jacobian = Some(Box::new(j));
        self
    }

    /// Diffusion is a constant matrix by construction; state-dependent
    /// diffusion is not representable.
    pub fn diffusion(mut self, sigma: DMatrix<f64>) -> Self {
        self.diffusion = Some(sigma);
        self
    }

    pub fn beta(mut self, beta: f64) -> Self {
        self.beta = beta;
        self
    }

    pub fn potential(mut self, v: impl Fn(&DVector<f64>) -> f64 + Send + Sync + 'static) -> Self {
        self.potential = Some(Box::new(v));
        self
    }

    pub fn x0(mut self, x0: DVector<f64>) -> Self {
        self.x0 = Some(x0);
        self
    }

    pub fn build(self) -> Result<SdeSystem, SdeError> {
        let (d, m) = (self.d, self.m);
        if d == 0 {
            return Err(SdeError::ZeroDimension);
        }
        if m > d {
            return Err(SdeError::NoiseDimension { d, m });
        }
        if !(self.beta > 0.0) {
            return Err(SdeError::InvalidBeta(self.beta));
        }
        let diffusion = self.diffusion.unwrap_or_else(|| DMatrix::identity(d, m));
        if diffusion.nrows() != d || diffusion.ncols() != m {
            return Err(SdeError::DiffusionShape { d, m });
        }
        // m = 0 is a deterministic system; nothing to rank-check.
        if m > 0 {
            let rank = diffusion.clone().svd(false, false).rank(1e-12);
            if rank < m {
                return Err(SdeError::RankDeficientDiffusion { rank, m });
            }
        }
        let drift: Arc<DriftFn> = Arc::from(self.drift.expect("drift function is required"));
        let (jacobian, jacobian_is_fd): (Box<JacobianFn>, bool) = match self.jacobian {
            Some(j) => (j, false),
            None => {
                // Finite-difference fallback for user systems, flagged as such.
                let f = Arc::clone(&drift);
                (
                    Box::new(move |x: &DVector<f64>| finite_difference_jacobian(&*f, x)),
                    true,
                )
            }
        };
        Ok(SdeSystem {
            inner: Arc::new(Inner {
                name: self.name,
                d,
                m,
                drift,
                jacobian,
                jacobian_is_fd,
                diffusion,
                beta: self.beta,
                potential: self.potential,
                x0: self.x0.unwrap_or_else(|| DVector::zeros(d)),
            }),
        })
    }
}

/// Central-difference Jacobian with step `h = 1e-6 * max(1, |x_j|)`.
pub fn finite_difference_jacobian(f: &DriftFn, x: &DVector<f64>) -> DMatrix<f64> {
    let d = x.len();
    let fx = f(x);
    let rows = fx.len();
    let mut jac = DMatrix::zeros(rows, d);
    for j in 0..d {
        let h = 1e-6 * x[j].abs().max(1.0);
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += h;
        xm[j] -= h;
        let fp = f(&xp);
        let fm = f(&xm);
        for i in 0..rows {
            jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    jac
}

/// Central-difference gradient of a scalar function.
pub fn finite_difference_gradient(v: &PotentialFn, x: &DVector<f64>) -> DVector<f64> {
    let d = x.len();
    let mut grad = DVector::zeros(d);
    for j in 0..d {
        let h = 1e-6 * x[j].abs().max(1.0);
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += h;
        xm[j] -= h;
        grad[j] = (v(&xp) - v(&xm)) / (2.0 * h);
    }
    grad
}

/// The built-in benchmark systems.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BenchmarkId {
    /// 1D double-well potential, `V(x) = mu/4 (x^2-1)^2`, mu=2, beta=1.
    #[serde(rename = "double-well-1d")]
    DoubleWell1D,
    /// 2D gradient system, `V = exp(mu1/2 x1^2 + mu2/2 x2^2)`, mu1=0.1,
    /// mu2=1, beta=2.
    #[serde(rename = "gradient-2d")]
    Gradient2D,
    /// 3D stochastic Lorenz system with degenerate noise (no noise on x3);
    /// sigma=10, gamma=28, b=8/3, beta=1.
    #[serde(rename = "lorenz-3d")]
    Lorenz3D,
}

impl BenchmarkId {
    pub const ALL: [BenchmarkId; 3] = [
        BenchmarkId::DoubleWell1D,
        BenchmarkId::Gradient2D,
        BenchmarkId::Lorenz3D,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            BenchmarkId::DoubleWell1D => "double-well-1d",
            BenchmarkId::Gradient2D => "gradient-2d",
            BenchmarkId::Lorenz3D => "lorenz-3d",
        }
    }
}

impl fmt::Display for BenchmarkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BenchmarkId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "double-well-1d" => Ok(BenchmarkId::DoubleWell1D),
            "gradient-2d" => Ok(BenchmarkId::Gradient2D),
            "lorenz-3d" => Ok(BenchmarkId::Lorenz3D),
            other => Err(format!(
                "unknown benchmark `{other}` (expected double-well-1d, gradient-2d or lorenz-3d)"
            )),
        }
    }
}

/// Builds a fully parameterized benchmark system.
pub fn make_benchmark(id: BenchmarkId) -> SdeSystem {
    match id {
        BenchmarkId::DoubleWell1D => double_well_1d(),
        BenchmarkId::Gradient2D => gradient_2d(),
        BenchmarkId::Lorenz3D => lorenz_3d(),
    }
}

fn double_well_1d() -> SdeSystem {
    const MU: f64 = 2.0;
    const BETA: f64 = 1.0;
    let sigma = (2.0 / BETA).sqrt();
    SdeSystem::builder(BenchmarkId::DoubleWell1D.name(), 1, 1)
        .drift(|x| {
            let v = x[0];
            DVector::from_element(1, -MU * v * (v * v - 1.0))
        })
        .jacobian(|x| {
            let v = x[0];
            DMatrix::from_element(1, 1, -MU * (3.0 * v * v - 1.0))
        })
        .potential(|x| {
            let v = x[0];
            MU / 4.0 * (v * v - 1.0).powi(2)
        })
        .diffusion(DMatrix::from_element(1, 1, sigma))
        .beta(BETA)
        .x0(DVector::from_element(1, 0.5))
        .build()
        .expect("double-well benchmark is well-formed")
}

fn gradient_2d() -> SdeSystem {
    const MU1: f64 = 0.1;
    const MU2: f64 = 1.0;
    const BETA: f64 = 2.0;
    let sigma = (2.0 / BETA).sqrt();
    let bulk = |x: &DVector<f64>| (MU1 / 2.0 * x[0] * x[0] + MU2 / 2.0 * x[1] * x[1]).exp();
    SdeSystem::builder(BenchmarkId::Gradient2D.name(), 2, 2)
        .drift(move |x| {
            let e = bulk(x);
            DVector::from_column_slice(&[-MU1 * x[0] * e, -MU2 * x[1] * e])
        })
        .jacobian(move |x| {
            // Hessian of -V for V = exp(mu1/2 x1^2 + mu2/2 x2^2).
            let e = bulk(x);
            let g1 = MU1 * x[0];
            let g2 = MU2 * x[1];
            DMatrix::from_row_slice(
                2,
                2,
                &[
                    -e * (MU1 + g1 * g1),
                    -e * g1 * g2,
                    -e * g1 * g2,
                    -e * (MU2 + g2 * g2),
                ],
            )
        })
        .potential(move |x| bulk(x))
        .diffusion(DMatrix::from_diagonal_element(2, 2, sigma))
        .beta(BETA)
        .x0(DVector::zeros(2))
        .build()
        .expect("2d gradient benchmark is well-formed")
}

fn lorenz_3d() -> SdeSystem {
    const SIGMA_L: f64 = 10.0;
    const GAMMA: f64 = 28.0;
    const B: f64 = 8.0 / 3.0;
    const BETA: f64 = 1.0;
    let noise = (2.0 / BETA).sqrt();
    // Degenerate noise: Brownian channels act on x1 and x2 only.
    let mut diffusion = DMatrix::zeros(3, 2);
    diffusion[(0, 0)] = noise;
    diffusion[(1, 1)] = noise;
    SdeSystem::builder(BenchmarkId::Lorenz3D.name(), 3, 2)
        .drift(|x| {
            DVector::from_column_slice(&[
                SIGMA_L * (x[1] - x[0]),
                x[0] * (GAMMA - x[2]) - x[1],
                x[0] * x[1] - B * x[2],
            ])
        })
        .jacobian(|x| {
            DMatrix::from_row_slice(
                3,
                3,
                &[
                    -SIGMA_L,
                    SIGMA_L,
                    0.0,
                    GAMMA - x[2],
                    -1.0,
                    -x[0],
                    x[1],
                    x[0],
                    -B,
                ],
            )
        })
        .diffusion(diffusion)
        .beta(BETA)
        .x0(DVector::from_column_slice(&[1.0, 1.0, 1.0]))
        .build()
        .expect("lorenz benchmark is well-formed")
}

/// Builds a linear system `f(x) = A x` with the given diffusion. When `A` is
/// symmetric the potential `V(x) = -x' A x / 2` is attached, so gradient
/// diagnostics apply.
pub fn linear_system(
    name: impl Into<String>,
    a: DMatrix<f64>,
    diffusion: DMatrix<f64>,
    beta: f64,
) -> Result<SdeSystem, SdeError> {
    let d = diffusion.nrows();
    let m = diffusion.ncols();
    if a.nrows() != d || a.ncols() != d {
        return Err(SdeError::LinearShape {
            d,
            rows: a.nrows(),
            cols: a.ncols(),
        });
    }
    let symmetric = (&a - a.transpose()).amax() <= 1e-12 * a.amax().max(1.0);
    let a_drift = a.clone();
    let a_jac = a.clone();
    let mut builder = SdeSystem::builder(name, d, m)
        .drift(move |x| &a_drift * x)
        .jacobian(move |_| a_jac.clone())
        .diffusion(diffusion)
        .beta(beta);
    if symmetric {
        let a_pot = a;
        builder = builder.potential(move |x| -0.5 * (x.transpose() * &a_pot * x)[(0, 0)]);
    }
    builder.build()
}

/// A serializable description of a system, used in configs and inferred
/// scheme files. `Named` records a system that was supplied programmatically
/// and cannot be rebuilt from the description alone.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "kebab-case")]
pub enum SystemSpec {
    Builtin(BenchmarkId),
    Linear {
        name: String,
        matrix: Vec<Vec<f64>>,
        diffusion: Vec<Vec<f64>>,
        beta: f64,
    },
    Named(String),
}

impl SystemSpec {
    pub fn name(&self) -> String {
        match self {
            SystemSpec::Builtin(id) => id.name().to_string(),
            SystemSpec::Linear { name, .. } => name.clone(),
            SystemSpec::Named(name) => name.clone(),
        }
    }

    pub fn resolve(&self) -> Result<SdeSystem, SdeError> {
        match self {
            SystemSpec::Builtin(id) => Ok(make_benchmark(*id)),
            SystemSpec::Linear {
                name,
                matrix,
                diffusion,
                beta,
            } => {
                let a = rows_to_matrix(matrix);
                let sigma = rows_to_matrix(diffusion);
                linear_system(name.clone(), a, sigma, *beta)
            }
            SystemSpec::Named(name) => Err(SdeError::UnresolvableSpec(name.clone())),
        }
    }
}

fn rows_to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, |r| r.len());
    DMatrix::from_fn(nrows, ncols, |i, j| rows[i].get(j).copied().unwrap_or(0.0))
}

pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}
