//! Reference data generation.
//!
//! Trajectories are solved with split-step backward Euler at a fine step
//! `dt`, downsampled to the coarse step `delta = gap * dt`, and the coarse
//! Brownian increments are accumulated as the sum of the `gap` fine Gaussian
//! increments over each window (the fine Brownian path itself is not stored;
//! it is reproducible from the seed).
//!
//! Every trajectory draws from its own random stream addressed by
//! `(seed, trajectory index)`, with Gaussian increments drawn in step order,
//! so datasets are bit-identical regardless of how many workers generate
//! them.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::integrators::{ssbe_step, ImplicitSolverOptions};
use crate::rng::StreamRng;
use crate::sde::SdeSystem;

const MAGIC: &[u8; 7] = b"ISALT1\0";
const FORMAT_VERSION: u32 = 1;
/// Hard cap on a payload (in f64 elements) accepted from a file header,
/// guarding against corrupted headers requesting absurd allocations.
const MAX_PAYLOAD_ELEMENTS: u128 = 1 << 34;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("trajectory {trajectory} blew up at fine step {step}")]
    BlowUp { trajectory: usize, step: usize },
    #[error("invalid generation config: {0}")]
    InvalidConfig(String),
    #[error("initial conditions: expected {expected} states of dimension {dim}, got {got}")]
    InitialConditions { expected: usize, dim: usize, got: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a dataset file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported dataset format version {0}")]
    UnsupportedVersion(u32),
    #[error("dataset file is truncated or has trailing bytes: expected {expected} bytes of payload, found {actual}")]
    PayloadSize { expected: u64, actual: u64 },
    #[error("dataset header is inconsistent: {0}")]
    HeaderMismatch(String),
    #[error("dataset name is not valid UTF-8")]
    InvalidName,
}

/// Configuration for [`generate_dataset`].
#[derive(Clone)]
pub struct GenerationConfig {
    pub system: SdeSystem,
    /// Fine time step of the reference solver.
    pub dt: f64,
    /// Number of fine steps per trajectory; must be divisible by `gap`.
    pub total_steps: usize,
    /// Downsampling factor; the dataset step is `delta = gap * dt`.
    pub gap: usize,
    /// Number of independent trajectories (M).
    pub trajectories: usize,
    pub seed: u64,
    /// Fine steps discarded by stationarity diagnostics. Defaults to 10% of
    /// `total_steps`.
    pub burn_in_steps: usize,
    /// Max-norm threshold beyond which a state counts as blown up.
    pub blowup_threshold: f64,
    pub solver: ImplicitSolverOptions,
}

impl GenerationConfig {
    pub fn new(system: SdeSystem, dt: f64, total_steps: usize, gap: usize, trajectories: usize, seed: u64) -> Self {
        Self {
            system,
            dt,
            total_steps,
            gap,
            trajectories,
            seed,
            burn_in_steps: total_steps / 10,
            blowup_threshold: 1e10,
            solver: ImplicitSolverOptions::default(),
        }
    }

    pub fn delta(&self) -> f64 {
        self.gap as f64 * self.dt
    }

    pub fn validate(&self) -> Result<(), DatagenError> {
        if !(self.dt > 0.0) {
            return Err(DatagenError::InvalidConfig(format!("dt must be positive, got {}", self.dt)));
        }
        if self.gap == 0 {
            return Err(DatagenError::InvalidConfig("gap must be at least 1".into()));
        }
        if self.total_steps == 0 || self.total_steps % self.gap != 0 {
            return Err(DatagenError::InvalidConfig(format!(
                "total_steps ({}) must be a positive multiple of gap ({})",
                self.total_steps, self.gap
            )));
        }
        if self.burn_in_steps >= self.total_steps {
            return Err(DatagenError::InvalidConfig(format!(
                "burn_in_steps ({}) must be smaller than total_steps ({})",
                self.burn_in_steps, self.total_steps
            )));
        }
        if !(self.blowup_threshold > 0.0) {
            return Err(DatagenError::InvalidConfig("blowup_threshold must be positive".into()));
        }
        Ok(())
    }
}

/// A single fine-step reference path.
#[derive(Debug, Clone, PartialEq)]
pub struct LongTrajectory {
    states: Vec<f64>,
    d: usize,
    pub dt: f64,
    pub seed: u64,
    pub system_name: String,
}

impl LongTrajectory {
    /// Number of stored states, K + 1 for K steps.
    pub fn len(&self) -> usize {
        self.states.len() / self.d
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn state(&self, i: usize) -> DVector<f64> {
        DVector::from_column_slice(&self.states[i * self.d..(i + 1) * self.d])
    }

    /// All values of one coordinate, in time order.
    pub fn coordinate(&self, k: usize) -> Vec<f64> {
        self.states.iter().skip(k).step_by(self.d).copied().collect()
    }

    /// The same, skipping the first `burn_in` states.
    pub fn coordinate_after(&self, k: usize, burn_in: usize) -> Vec<f64> {
        self.states[burn_in * self.d..]
            .iter()
            .skip(k)
            .step_by(self.d)
            .copied()
            .collect()
    }

    pub fn states_flat(&self) -> &[f64] {
        &self.states
    }
}

fn check_state(x: &DVector<f64>, threshold: f64) -> bool {
    x.iter().all(|c| c.is_finite()) && x.amax() <= threshold
}

/// Solves one SSBE path at the fine step. Deterministic given the seed
/// (stream 0). Errors with the offending step index when the Newton solve
/// fails or the state exceeds the blow-up threshold.
pub fn generate_long_trajectory(
    system: &SdeSystem,
    x0: &DVector<f64>,
    dt: f64,
    steps: usize,
    seed: u64,
    opts: &ImplicitSolverOptions,
) -> Result<LongTrajectory, DatagenError> {
    let d = system.dim();
    let m = system.noise_dim();
    let sqrt_dt = dt.sqrt();
    let mut rng = StreamRng::new(seed, 0);
    let mut states = Vec::with_capacity((steps + 1) * d);
    states.extend(x0.iter());
    let mut x = x0.clone();
    for step in 0..steps {
        let db = rng.normal_vector(m, sqrt_dt);
        x = ssbe_step(system, &x, &db, dt, opts)
            .map_err(|_| DatagenError::BlowUp { trajectory: 0, step })?;
        if !check_state(&x, 1e10) {
            return Err(DatagenError::BlowUp { trajectory: 0, step });
        }
        states.extend(x.iter());
    }
    Ok(LongTrajectory {
        states,
        d,
        dt,
        seed,
        system_name: system.name().to_string(),
    })
}

/// Draws `count` initial states uniformly at random (with replacement) from
/// the post-burn-in part of a long trajectory. Deterministic given the seed.
pub fn sample_initial_conditions(
    long: &LongTrajectory,
    count: usize,
    burn_in_steps: usize,
    seed: u64,
) -> Result<Vec<DVector<f64>>, DatagenError> {
    let last = long.len().saturating_sub(1);
    if burn_in_steps >= last {
        return Err(DatagenError::InvalidConfig(format!(
            "burn_in_steps ({burn_in_steps}) must leave room in a trajectory of {} states",
            long.len()
        )));
    }
    let mut rng = StreamRng::new(seed, 0);
    Ok((0..count)
        .map(|_| long.state(rng.index_inclusive(burn_in_steps + 1, last)))
        .collect())
}

/// M downsampled trajectories of states and coarse Brownian increments at
/// spacing `delta = gap * dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    d: usize,
    m: usize,
    trajectories: usize,
    steps: usize,
    pub dt: f64,
    pub gap: usize,
    pub seed: u64,
    pub system_name: String,
    x: Vec<f64>,
    db: Vec<f64>,
}

impl TrajectoryDataset {
    /// Assembles a dataset from flat payloads (trajectory-major, time-major,
    /// coordinate innermost), validating shapes.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        d: usize,
        m: usize,
        trajectories: usize,
        steps: usize,
        dt: f64,
        gap: usize,
        seed: u64,
        system_name: String,
        x: Vec<f64>,
        db: Vec<f64>,
    ) -> Result<Self, DatagenError> {
        if d == 0 {
            return Err(DatagenError::HeaderMismatch("state dimension is zero".into()));
        }
        let expect_x = trajectories * (steps + 1) * d;
        let expect_db = trajectories * steps * m;
        if x.len() != expect_x || db.len() != expect_db {
            return Err(DatagenError::HeaderMismatch(format!(
                "payload lengths ({}, {}) do not match declared shape ({}, {})",
                x.len(),
                db.len(),
                expect_x,
                expect_db
            )));
        }
        Ok(Self {
            d,
            m,
            trajectories,
            steps,
            dt,
            gap,
            seed,
            system_name,
            x,
            db,
        })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn noise_dim(&self) -> usize {
        self.m
    }

    /// Number of trajectories M.
    pub fn num_trajectories(&self) -> usize {
        self.trajectories
    }

    /// Number of coarse transitions N per trajectory (N + 1 states).
    pub fn num_steps(&self) -> usize {
        self.steps
    }

    /// Total number of (state, increment) samples, M * N.
    pub fn sample_count(&self) -> usize {
        self.trajectories * self.steps
    }

    /// Coarse step `delta = gap * dt`.
    pub fn delta(&self) -> f64 {
        self.gap as f64 * self.dt
    }

    pub fn state(&self, traj: usize, step: usize) -> DVector<f64> {
        let off = (traj * (self.steps + 1) + step) * self.d;
        DVector::from_column_slice(&self.x[off..off + self.d])
    }

    pub fn state_slice(&self, traj: usize, step: usize) -> &[f64] {
        let off = (traj * (self.steps + 1) + step) * self.d;
        &self.x[off..off + self.d]
    }

    /// Coarse Brownian increment over `[t_n, t_n + delta)` of one trajectory.
    pub fn increment(&self, traj: usize, step: usize) -> DVector<f64> {
        let off = (traj * self.steps + step) * self.m;
        DVector::from_column_slice(&self.db[off..off + self.m])
    }

    pub fn increment_slice(&self, traj: usize, step: usize) -> &[f64] {
        let off = (traj * self.steps + step) * self.m;
        &self.db[off..off + self.m]
    }

    pub fn states_flat(&self) -> &[f64] {
        &self.x
    }

    pub fn increments_flat(&self) -> &[f64] {
        &self.db
    }

    /// All stored values of one state coordinate (across trajectories and
    /// times), a flat sample of the empirical measure.
    pub fn coordinate_samples(&self, k: usize) -> Vec<f64> {
        self.x.iter().skip(k).step_by(self.d).copied().collect()
    }

    /// The prefix sub-dataset with the first `trajectories` paths and the
    /// first `steps` transitions of each.
    pub fn prefix(&self, trajectories: usize, steps: usize) -> Result<Self, DatagenError> {
        if trajectories == 0 || trajectories > self.trajectories || steps == 0 || steps > self.steps {
            return Err(DatagenError::HeaderMismatch(format!(
                "prefix ({trajectories}, {steps}) exceeds dataset shape ({}, {})",
                self.trajectories, self.steps
            )));
        }
        let mut x = Vec::with_capacity(trajectories * (steps + 1) * self.d);
        let mut db = Vec::with_capacity(trajectories * steps * self.m);
        for t in 0..trajectories {
            let xoff = t * (self.steps + 1) * self.d;
            x.extend_from_slice(&self.x[xoff..xoff + (steps + 1) * self.d]);
            let doff = t * self.steps * self.m;
            db.extend_from_slice(&self.db[doff..doff + steps * self.m]);
        }
        Self::from_parts(
            self.d,
            self.m,
            trajectories,
            steps,
            self.dt,
            self.gap,
            self.seed,
            self.system_name.clone(),
            x,
            db,
        )
    }

    /// Reorders trajectories; used by estimator-invariance diagnostics.
    pub fn permute_trajectories(&self, order: &[usize]) -> Result<Self, DatagenError> {
        if order.len() != self.trajectories {
            return Err(DatagenError::HeaderMismatch("permutation length mismatch".into()));
        }
        let mut x = Vec::with_capacity(self.x.len());
        let mut db = Vec::with_capacity(self.db.len());
        for &t in order {
            let xoff = t * (self.steps + 1) * self.d;
            x.extend_from_slice(&self.x[xoff..xoff + (self.steps + 1) * self.d]);
            let doff = t * self.steps * self.m;
            db.extend_from_slice(&self.db[doff..doff + self.steps * self.m]);
        }
        Self::from_parts(
            self.d,
            self.m,
            self.trajectories,
            self.steps,
            self.dt,
            self.gap,
            self.seed,
            self.system_name.clone(),
            x,
            db,
        )
    }

    /// True when every stored state is finite.
    pub fn all_finite(&self) -> bool {
        self.x.iter().all(|v| v.is_finite()) && self.db.iter().all(|v| v.is_finite())
    }
}

fn generate_one_trajectory(
    cfg: &GenerationConfig,
    traj: usize,
    x0: &DVector<f64>,
) -> Result<(Vec<f64>, Vec<f64>), DatagenError> {
    let d = cfg.system.dim();
    let m = cfg.system.noise_dim();
    let n_coarse = cfg.total_steps / cfg.gap;
    let sqrt_dt = cfg.dt.sqrt();
    let mut rng = StreamRng::new(cfg.seed, traj as u64);
    let mut x = x0.clone();
    let mut states = Vec::with_capacity((n_coarse + 1) * d);
    let mut increments = Vec::with_capacity(n_coarse * m);
    states.extend(x.iter());
    let mut acc = DVector::<f64>::zeros(m);
    for step in 0..cfg.total_steps {
        let db = rng.normal_vector(m, sqrt_dt);
        x = ssbe_step(&cfg.system, &x, &db, cfg.dt, &cfg.solver)
            .map_err(|_| DatagenError::BlowUp { trajectory: traj, step })?;
        if !check_state(&x, cfg.blowup_threshold) {
            return Err(DatagenError::BlowUp { trajectory: traj, step });
        }
        acc += &db;
        if (step + 1) % cfg.gap == 0 {
            states.extend(x.iter());
            increments.extend(acc.iter());
            acc.fill(0.0);
        }
    }
    Ok((states, increments))
}

/// Advances every initial state by SSBE at the fine step, recording states
/// every `gap` steps and accumulating the coarse Brownian increments.
/// Trajectories run concurrently on independent streams; the result is a
/// deterministic gather in trajectory order. Fails if any trajectory blows
/// up: reference data must be clean.
pub fn generate_dataset(
    cfg: &GenerationConfig,
    initials: &[DVector<f64>],
) -> Result<TrajectoryDataset, DatagenError> {
    cfg.validate()?;
    let d = cfg.system.dim();
    if initials.len() != cfg.trajectories || initials.iter().any(|x| x.len() != d) {
        return Err(DatagenError::InitialConditions {
            expected: cfg.trajectories,
            dim: d,
            got: initials.len(),
        });
    }
    let n_coarse = cfg.total_steps / cfg.gap;
    let per_traj: Vec<Result<(Vec<f64>, Vec<f64>), DatagenError>> = initials
        .par_iter()
        .enumerate()
        .map(|(traj, x0)| generate_one_trajectory(cfg, traj, x0))
        .collect();
    let m = cfg.system.noise_dim();
    let mut x = Vec::with_capacity(cfg.trajectories * (n_coarse + 1) * d);
    let mut db = Vec::with_capacity(cfg.trajectories * n_coarse * m);
    for part in per_traj {
        let (states, increments) = part?;
        x.extend_from_slice(&states);
        db.extend_from_slice(&increments);
    }
    TrajectoryDataset::from_parts(
        d,
        m,
        cfg.trajectories,
        n_coarse,
        cfg.dt,
        cfg.gap,
        cfg.seed,
        cfg.system.name().to_string(),
        x,
        db,
    )
}

/// Human-readable mirror of the binary header, written next to the dataset.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetSidecar {
    pub magic: String,
    pub version: u32,
    pub d: u32,
    pub m: u32,
    pub trajectories: u64,
    pub steps: u64,
    pub dt: f64,
    pub gap: u64,
    pub seed: u64,
    pub system_name: String,
}

/// Writes the dataset in the binary container format (magic `ISALT1\0`,
/// little-endian header, X then dB payloads) plus a JSON sidecar at
/// `<path>.json`.
pub fn write_dataset(dataset: &TrajectoryDataset, path: &Path) -> Result<(), DatagenError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    w.write_u32::<LittleEndian>(dataset.d as u32)?;
    w.write_u32::<LittleEndian>(dataset.m as u32)?;
    w.write_u64::<LittleEndian>(dataset.trajectories as u64)?;
    w.write_u64::<LittleEndian>(dataset.steps as u64)?;
    w.write_f64::<LittleEndian>(dataset.dt)?;
    w.write_u64::<LittleEndian>(dataset.gap as u64)?;
    w.write_u64::<LittleEndian>(dataset.seed)?;
    let name = dataset.system_name.as_bytes();
    w.write_u32::<LittleEndian>(name.len() as u32)?;
    w.write_all(name)?;
    for v in &dataset.x {
        w.write_f64::<LittleEndian>(*v)?;
    }
    for v in &dataset.db {
        w.write_f64::<LittleEndian>(*v)?;
    }
    w.flush()?;

    let sidecar = DatasetSidecar {
        magic: "ISALT1".into(),
        version: FORMAT_VERSION,
        d: dataset.d as u32,
        m: dataset.m as u32,
        trajectories: dataset.trajectories as u64,
        steps: dataset.steps as u64,
        dt: dataset.dt,
        gap: dataset.gap as u64,
        seed: dataset.seed,
        system_name: dataset.system_name.clone(),
    };
    let sidecar_path = sidecar_path(path);
    let mut sw = BufWriter::new(File::create(sidecar_path)?);
    sw.write_all(serde_json::to_string_pretty(&sidecar).expect("sidecar serializes").as_bytes())?;
    sw.write_all(b"\n")?;
    sw.flush()?;
    Ok(())
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_os_string();
    os.push(".json");
    std::path::PathBuf::from(os)
}

/// Reads a dataset back; the inverse of [`write_dataset`], bit-exact.
pub fn read_dataset(path: &Path) -> Result<TrajectoryDataset, DatagenError> {
    let file = File::open(path)?;
    let file_len = file.metadata()?.len();
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 7];
    r.read_exact(&mut magic).map_err(|_| DatagenError::BadMagic)?;
    if &magic != MAGIC {
        return Err(DatagenError::BadMagic);
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != FORMAT_VERSION {
        return Err(DatagenError::UnsupportedVersion(version));
    }
    let d = r.read_u32::<LittleEndian>()? as usize;
    let m = r.read_u32::<LittleEndian>()? as usize;
    let trajectories = r.read_u64::<LittleEndian>()? as usize;
    let steps = r.read_u64::<LittleEndian>()? as usize;
    let dt = r.read_f64::<LittleEndian>()?;
    let gap = r.read_u64::<LittleEndian>()? as usize;
    let seed = r.read_u64::<LittleEndian>()?;
    let name_len = r.read_u32::<LittleEndian>()? as usize;
    let mut name_bytes = vec![0u8; name_len];
    r.read_exact(&mut name_bytes)
        .map_err(|_| DatagenError::PayloadSize { expected: name_len as u64, actual: 0 })?;
    let system_name = String::from_utf8(name_bytes).map_err(|_| DatagenError::InvalidName)?;

    let x_elems = trajectories as u128 * (steps as u128 + 1) * d as u128;
    let db_elems = trajectories as u128 * steps as u128 * m as u128;
    if x_elems + db_elems > MAX_PAYLOAD_ELEMENTS {
        return Err(DatagenError::HeaderMismatch(format!(
            "header declares an implausible payload of {} elements",
            x_elems + db_elems
        )));
    }
    let header_len = (MAGIC.len() + 4 + 4 + 4 + 8 + 8 + 8 + 8 + 8 + 4 + name_len) as u64;
    let expected_payload = (x_elems + db_elems) as u64 * 8;
    let actual_payload = file_len.saturating_sub(header_len);
    if actual_payload != expected_payload {
        return Err(DatagenError::PayloadSize {
            expected: expected_payload,
            actual: actual_payload,
        });
    }

    let mut x = vec![0.0f64; x_elems as usize];
    r.read_f64_into::<LittleEndian>(&mut x).map_err(|_| DatagenError::PayloadSize {
        expected: expected_payload,
        actual: actual_payload,
    })?;
    let mut db = vec![0.0f64; db_elems as usize];
    r.read_f64_into::<LittleEndian>(&mut db).map_err(|_| DatagenError::PayloadSize {
        expected: expected_payload,
        actual: actual_payload,
    })?;
    TrajectoryDataset::from_parts(d, m, trajectories, steps, dt, gap, seed, system_name, x, db)
}
