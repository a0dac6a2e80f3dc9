//! Simulation of inferred schemes.
//!
//! The update per step is
//!
//! ```text
//! X_{n+1} = X_n + delta * sum_i c_i phi_i(X_n, xi_n) + delta * sigma_eta eta_n
//! ```
//!
//! with `xi_n ~ N(0, delta I_m)`, `eta_n ~ N(0, I_d)` drawn from two disjoint
//! substreams per ensemble member (streams `2j` and `2j + 1` of the seed), so
//! toggling the residual noise never perturbs the driving noise.
//!
//! The noise basis contribution is applied as `c_2 (sigma xi)` rather than
//! `delta * c_2 (sigma xi / delta)`; the two are algebraically identical, and
//! the former makes a scheme with plain coefficients `(0, 1, 1)` and zero
//! residual reproduce the corresponding explicit scheme bit for bit on the
//! same noise stream.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

use crate::basis::{BasisError, BasisFamily};
use crate::datagen::TrajectoryDataset;
use crate::inference::InferredScheme;
use crate::integrators::{scheme_step, ImplicitSolverOptions, SchemeKind};
use crate::rng::StreamRng;
use crate::sde::{SdeError, SdeSystem};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("scheme/system mismatch: {0}")]
    SchemeMismatch(String),
    #[error(transparent)]
    System(#[from] SdeError),
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error("simulation config invalid: {0}")]
    InvalidConfig(String),
    #[error("cannot export paths: {0}")]
    Export(String),
    #[error("dataset error: {0}")]
    Dataset(#[from] crate::datagen::DatagenError),
}

/// A prepared stepper for one inferred scheme.
pub struct InferredStepper {
    family: BasisFamily,
    coefficients: DMatrix<f64>,
    sigma_eta: DVector<f64>,
    delta: f64,
    include_c0: bool,
    has_residual: bool,
}

impl InferredStepper {
    pub fn new(scheme: &InferredScheme, system: SdeSystem) -> Result<Self, SimError> {
        scheme
            .validate()
            .map_err(|e| SimError::SchemeMismatch(e.to_string()))?;
        if scheme.dim() != system.dim() {
            return Err(SimError::SchemeMismatch(format!(
                "scheme has {} coordinates but system `{}` has dimension {}",
                scheme.dim(),
                system.name(),
                system.dim()
            )));
        }
        let family = BasisFamily::new(scheme.family, scheme.include_c0, scheme.delta, system)?;
        Ok(Self {
            coefficients: scheme.coefficient_matrix(),
            sigma_eta: scheme.sigma_eta_vector(),
            delta: scheme.delta,
            include_c0: scheme.include_c0,
            has_residual: scheme.sigma_eta.iter().any(|v| *v != 0.0),
            family,
        })
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn system(&self) -> &SdeSystem {
        self.family.system()
    }

    /// One update with driving noise `xi ~ N(0, delta I_m)` and residual
    /// noise `eta ~ N(0, I_d)`. Non-finite values pass through unmodified;
    /// the caller polices blow-up.
    pub fn step(
        &self,
        x: &DVector<f64>,
        xi: &DVector<f64>,
        eta: &DVector<f64>,
    ) -> Result<DVector<f64>, BasisError> {
        let forcing = self.family.system().diffusion() * xi;
        let drift_term = self.family.drift_term(x, &forcing)?;
        let d = x.len();
        let mut next = x.clone();
        let mut col = 0;
        if self.include_c0 {
            for k in 0..d {
                next[k] += self.coefficients[(k, 0)] * x[k] * self.delta;
            }
            col = 1;
        }
        for k in 0..d {
            next[k] += self.coefficients[(k, col)] * drift_term[k] * self.delta;
        }
        for k in 0..d {
            next[k] += self.coefficients[(k, col + 1)] * forcing[k];
        }
        if self.has_residual {
            for k in 0..d {
                next[k] += self.sigma_eta[k] * eta[k] * self.delta;
            }
        }
        Ok(next)
    }
}

/// One update of an inferred scheme; convenience wrapper over
/// [`InferredStepper`] for callers that step by hand.
pub fn step_inferred(
    scheme: &InferredScheme,
    system: &SdeSystem,
    x: &DVector<f64>,
    xi: &DVector<f64>,
    eta: &DVector<f64>,
) -> Result<DVector<f64>, SimError> {
    let stepper = InferredStepper::new(scheme, system.clone())?;
    Ok(stepper.step(x, xi, eta)?)
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub scheme: InferredScheme,
    /// Initial states, one per ensemble member.
    pub x0: Vec<DVector<f64>>,
    /// Steps per trajectory.
    pub steps: usize,
    pub seed: u64,
    pub blowup_threshold: f64,
    /// Record every this many steps (>= 1); sample `i` sits at time
    /// `i * record_every * delta`.
    pub record_every: usize,
    /// Also record the accumulated driving noise per recorded interval,
    /// enabling export in the dataset container format.
    pub record_noise: bool,
}

impl SimConfig {
    pub fn new(scheme: InferredScheme, x0: Vec<DVector<f64>>, steps: usize, seed: u64) -> Self {
        Self {
            scheme,
            x0,
            steps,
            seed,
            blowup_threshold: 1e10,
            record_every: 1,
            record_noise: false,
        }
    }

    fn validate(&self) -> Result<(), SimError> {
        if self.steps == 0 {
            return Err(SimError::InvalidConfig("steps must be at least 1".into()));
        }
        if self.record_every == 0 {
            return Err(SimError::InvalidConfig("record_every must be at least 1".into()));
        }
        if self.x0.is_empty() {
            return Err(SimError::InvalidConfig("at least one initial state is required".into()));
        }
        if !(self.blowup_threshold > 0.0) {
            return Err(SimError::InvalidConfig("blowup_threshold must be positive".into()));
        }
        Ok(())
    }
}

/// One simulated trajectory: recorded states plus an explicit blow-up flag.
/// A blown-up trajectory stops at the offending step but keeps everything
/// recorded before it.
#[derive(Debug, Clone, PartialEq)]
pub struct SimPath {
    pub states: Vec<DVector<f64>>,
    /// Accumulated driving noise per recorded interval (present when
    /// `record_noise` was set).
    pub noise: Vec<DVector<f64>>,
    /// Fine step index at which the trajectory was flagged blown up.
    pub blowup_step: Option<usize>,
}

impl SimPath {
    pub fn blew_up(&self) -> bool {
        self.blowup_step.is_some()
    }

    pub fn coordinate(&self, k: usize) -> Vec<f64> {
        self.states.iter().map(|x| x[k]).collect()
    }
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub paths: Vec<SimPath>,
    pub delta: f64,
    pub record_every: usize,
}

impl SimOutput {
    pub fn any_blowup(&self) -> bool {
        self.paths.iter().any(|p| p.blew_up())
    }

    /// Exports the ensemble in the dataset container format with
    /// `dt = delta` and `gap = record_every`, so statistics operate
    /// uniformly on generated and simulated data. Requires noise recording
    /// and no blown-up members.
    pub fn to_dataset(&self, system_name: &str, noise_dim: usize, seed: u64) -> Result<TrajectoryDataset, SimError> {
        if self.any_blowup() {
            return Err(SimError::Export("ensemble contains blown-up trajectories".into()));
        }
        let steps = self
            .paths
            .first()
            .map(|p| p.states.len().saturating_sub(1))
            .unwrap_or(0);
        if steps == 0 {
            return Err(SimError::Export("nothing recorded".into()));
        }
        let d = self.paths[0].states[0].len();
        let mut x = Vec::with_capacity(self.paths.len() * (steps + 1) * d);
        let mut db = Vec::with_capacity(self.paths.len() * steps * noise_dim);
        for path in &self.paths {
            if path.noise.len() != steps {
                return Err(SimError::Export(
                    "noise was not recorded; set record_noise in the simulation config".into(),
                ));
            }
            for s in &path.states {
                x.extend(s.iter());
            }
            for n in &path.noise {
                db.extend(n.iter());
            }
        }
        Ok(TrajectoryDataset::from_parts(
            d,
            noise_dim,
            self.paths.len(),
            steps,
            self.delta,
            self.record_every,
            seed,
            system_name.to_string(),
            x,
            db,
        )?)
    }
}

fn state_ok(x: &DVector<f64>, threshold: f64) -> bool {
    x.iter().all(|v| v.is_finite()) && x.amax() <= threshold
}

fn simulate_member(
    stepper: &InferredStepper,
    cfg: &SimConfig,
    member: usize,
    x0: &DVector<f64>,
) -> SimPath {
    let m = stepper.system().noise_dim();
    let d = stepper.system().dim();
    let sqrt_delta = stepper.delta.sqrt();
    let mut xi_rng = StreamRng::new(cfg.seed, 2 * member as u64);
    let mut eta_rng = StreamRng::new(cfg.seed, 2 * member as u64 + 1);
    let recorded = cfg.steps / cfg.record_every;
    let mut states = Vec::with_capacity(recorded + 1);
    let mut noise = Vec::new();
    if cfg.record_noise {
        noise.reserve(recorded);
    }
    states.push(x0.clone());
    let mut acc = DVector::<f64>::zeros(m);
    let mut x = x0.clone();
    for step in 0..cfg.steps {
        let xi = xi_rng.normal_vector(m, sqrt_delta);
        let eta = if stepper.has_residual {
            eta_rng.normal_vector(d, 1.0)
        } else {
            DVector::zeros(d)
        };
        match stepper.step(&x, &xi, &eta) {
            Ok(next) if state_ok(&next, cfg.blowup_threshold) => x = next,
            _ => {
                return SimPath {
                    states,
                    noise,
                    blowup_step: Some(step),
                }
            }
        }
        if cfg.record_noise {
            acc += &xi;
        }
        if (step + 1) % cfg.record_every == 0 {
            states.push(x.clone());
            if cfg.record_noise {
                noise.push(acc.clone());
                acc.fill(0.0);
            }
        }
    }
    SimPath {
        states,
        noise,
        blowup_step: None,
    }
}

/// Runs the inferred scheme for every initial state. Members simulate
/// concurrently on independent streams; a blow-up terminates its own
/// trajectory but not the ensemble.
pub fn simulate(cfg: &SimConfig) -> Result<SimOutput, SimError> {
    let system = cfg.scheme.system.resolve()?;
    simulate_with_system(cfg, &system)
}

/// As [`simulate`] but with an explicitly supplied system, for schemes whose
/// system description is not reconstructible.
pub fn simulate_with_system(cfg: &SimConfig, system: &SdeSystem) -> Result<SimOutput, SimError> {
    cfg.validate()?;
    let stepper = InferredStepper::new(&cfg.scheme, system.clone())?;
    for (i, x0) in cfg.x0.iter().enumerate() {
        if x0.len() != system.dim() {
            return Err(SimError::InvalidConfig(format!(
                "initial state {i} has dimension {} but the system needs {}",
                x0.len(),
                system.dim()
            )));
        }
    }
    let paths: Vec<SimPath> = cfg
        .x0
        .par_iter()
        .enumerate()
        .map(|(member, x0)| simulate_member(&stepper, cfg, member, x0))
        .collect();
    Ok(SimOutput {
        paths,
        delta: cfg.scheme.delta,
        record_every: cfg.record_every,
    })
}

/// A plain-scheme trajectory at step `delta`, driven by the xi stream of
/// ensemble member `member` (stream `2 * member`). Newton failures of the
/// implicit scheme count as blow-up at that step.
#[allow(clippy::too_many_arguments)]
pub fn simulate_plain(
    system: &SdeSystem,
    kind: SchemeKind,
    delta: f64,
    x0: &DVector<f64>,
    steps: usize,
    seed: u64,
    member: usize,
    opts: &ImplicitSolverOptions,
    blowup_threshold: f64,
) -> SimPath {
    let m = system.noise_dim();
    let sqrt_delta = delta.sqrt();
    let mut rng = StreamRng::new(seed, 2 * member as u64);
    let mut states = Vec::with_capacity(steps + 1);
    states.push(x0.clone());
    let mut x = x0.clone();
    for step in 0..steps {
        let db = rng.normal_vector(m, sqrt_delta);
        match scheme_step(kind, system, &x, &db, delta, opts) {
            Ok(next) if state_ok(&next, blowup_threshold) => x = next,
            _ => {
                return SimPath {
                    states,
                    noise: Vec::new(),
                    blowup_step: Some(step),
                }
            }
        }
        states.push(x.clone());
    }
    SimPath {
        states,
        noise: Vec::new(),
        blowup_step: None,
    }
}
