//! Experiment configuration: TOML schema, validation, and built-in presets.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use isalt_core::basis::FamilyKind;
use isalt_core::sde::{BenchmarkId, SdeSystem, SystemSpec};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub system: SystemSection,
    pub data: DataSection,
    #[serde(default)]
    pub inference: InferenceSection,
    #[serde(default)]
    pub stats: StatsSection,
    #[serde(default)]
    pub study: StudySection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub builtin: Option<BenchmarkId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub linear: Option<LinearSystemSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearSystemSection {
    pub name: String,
    pub matrix: Vec<Vec<f64>>,
    pub diffusion: Vec<Vec<f64>>,
    #[serde(default = "default_beta")]
    pub beta: f64,
}

fn default_beta() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Fine solver step.
    pub dt: f64,
    /// Physical length of the long reference trajectory.
    pub t_long: f64,
    /// Physical length of each training trajectory.
    pub horizon: f64,
    /// Number of training trajectories (M).
    pub trajectories: usize,
    /// Ascending downsampling factors; one dataset per gap.
    pub gaps: Vec<usize>,
    #[serde(default = "default_burn_in_fraction")]
    pub burn_in_fraction: f64,
    #[serde(default = "default_blowup_threshold")]
    pub blowup_threshold: f64,
}

fn default_burn_in_fraction() -> f64 {
    0.1
}

fn default_blowup_threshold() -> f64 {
    1e10
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilyChoice {
    pub family: FamilyKind,
    #[serde(default)]
    pub include_c0: bool,
}

impl FamilyChoice {
    pub fn label(&self) -> String {
        if self.include_c0 {
            format!("{}-c0", self.family.label())
        } else {
            self.family.label().to_string()
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceSection {
    #[serde(default = "default_families")]
    pub families: Vec<FamilyChoice>,
    #[serde(default = "default_svd_cutoff")]
    pub svd_cutoff: f64,
}

fn default_svd_cutoff() -> f64 {
    1e-12
}

/// The five standard parametric options.
fn default_families() -> Vec<FamilyChoice> {
    vec![
        FamilyChoice { family: FamilyKind::IsEm, include_c0: false },
        FamilyChoice { family: FamilyKind::IsRk4, include_c0: false },
        FamilyChoice { family: FamilyKind::IsRk4, include_c0: true },
        FamilyChoice { family: FamilyKind::IsSsbe, include_c0: false },
        FamilyChoice { family: FamilyKind::IsSsbe, include_c0: true },
    ]
}

impl Default for InferenceSection {
    fn default() -> Self {
        Self {
            families: default_families(),
            svd_cutoff: default_svd_cutoff(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatsSection {
    #[serde(default = "default_bins")]
    pub bins: usize,
    /// ACF horizon in coarse steps.
    #[serde(default = "default_max_lag")]
    pub max_lag: usize,
    /// Steps of each evaluation trajectory.
    #[serde(default = "default_sim_steps")]
    pub sim_steps: usize,
    #[serde(default = "default_blowup_seeds")]
    pub blowup_seeds: usize,
    #[serde(default = "default_blowup_steps")]
    pub blowup_steps: usize,
}

fn default_bins() -> usize {
    100
}
fn default_max_lag() -> usize {
    100
}
fn default_sim_steps() -> usize {
    1_000_000
}
fn default_blowup_seeds() -> usize {
    10
}
fn default_blowup_steps() -> usize {
    100_000
}

impl Default for StatsSection {
    fn default() -> Self {
        Self {
            bins: default_bins(),
            max_lag: default_max_lag(),
            sim_steps: default_sim_steps(),
            blowup_seeds: default_blowup_seeds(),
            blowup_steps: default_blowup_steps(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct StudySection {
    /// Family targeted by the convergence study.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub family: Option<FamilyChoice>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub convergence_gap: Option<usize>,
    /// (trajectories, steps) prefixes, ascending in product.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub convergence_grid: Option<Vec<(usize, usize)>>,
    /// Scheme labels scanned for blow-up: `plain-em`, `plain-rk4`,
    /// `plain-ssbe`, or any inferred family label such as `is-rk4-c0`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scan_schemes: Option<Vec<String>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let cfg: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.system.builtin.is_some() == self.system.linear.is_some() {
            return Err(CliError::Config(
                "config must set exactly one of system.builtin or system.linear".into(),
            ));
        }
        if !(self.data.dt > 0.0) {
            return Err(CliError::Config("data.dt must be positive".into()));
        }
        if self.data.gaps.is_empty() {
            return Err(CliError::Config("data.gaps must be non-empty".into()));
        }
        if self.data.gaps.windows(2).any(|w| w[1] <= w[0]) || self.data.gaps[0] == 0 {
            return Err(CliError::Config("data.gaps must be positive and strictly ascending".into()));
        }
        if self.data.trajectories == 0 {
            return Err(CliError::Config("data.trajectories must be at least 1".into()));
        }
        if !(self.data.t_long > 0.0) || !(self.data.horizon > 0.0) {
            return Err(CliError::Config("data.t_long and data.horizon must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.data.burn_in_fraction) {
            return Err(CliError::Config("data.burn_in_fraction must lie in [0, 1)".into()));
        }
        let min_fine = (self.data.horizon / self.data.dt) as usize;
        if let Some(&gap) = self.data.gaps.iter().find(|&&g| g > min_fine) {
            return Err(CliError::Config(format!(
                "gap {gap} exceeds the {min_fine} fine steps of the horizon"
            )));
        }
        Ok(())
    }

    pub fn system_spec(&self) -> SystemSpec {
        match (&self.system.builtin, &self.system.linear) {
            (Some(id), _) => SystemSpec::Builtin(*id),
            (None, Some(lin)) => SystemSpec::Linear {
                name: lin.name.clone(),
                matrix: lin.matrix.clone(),
                diffusion: lin.diffusion.clone(),
                beta: lin.beta,
            },
            (None, None) => unreachable!("validated"),
        }
    }

    pub fn resolve_system(&self) -> CliResult<SdeSystem> {
        self.system_spec()
            .resolve()
            .map_err(|e| CliError::Config(e.to_string()))
    }

    /// Fine steps of the long reference trajectory.
    pub fn long_steps(&self) -> usize {
        (self.data.t_long / self.data.dt).round() as usize
    }

    /// Fine steps per training trajectory, truncated to a multiple of `gap`.
    pub fn horizon_steps(&self, gap: usize) -> usize {
        let fine = (self.data.horizon / self.data.dt).round() as usize;
        fine / gap * gap
    }

    pub fn burn_in_long(&self) -> usize {
        (self.long_steps() as f64 * self.data.burn_in_fraction) as usize
    }

}

/// Built-in experiment presets. Desk presets shrink the trajectory count and
/// horizons roughly tenfold while keeping the fine steps and gap menus.
pub fn preset(name: &str) -> CliResult<ExperimentConfig> {
    let (system, dt, t_long, horizon, trajectories, gaps, seed): (
        SystemSection,
        f64,
        f64,
        f64,
        usize,
        Vec<usize>,
        u64,
    ) = match name {
        "double-well-desk" => (
            builtin(BenchmarkId::DoubleWell1D),
            1e-3,
            200.0,
            100.0,
            100,
            vec![10, 20, 40, 80, 120, 160, 200],
            7,
        ),
        "double-well-paper" => (
            builtin(BenchmarkId::DoubleWell1D),
            1e-3,
            2000.0,
            1000.0,
            1000,
            vec![1, 2, 4, 10, 20, 40, 80, 120, 160, 200],
            7,
        ),
        "gradient-2d-desk" => (
            builtin(BenchmarkId::Gradient2D),
            2e-3,
            200.0,
            100.0,
            100,
            vec![10, 40, 80, 120, 160, 200],
            11,
        ),
        "gradient-2d-paper" => (
            builtin(BenchmarkId::Gradient2D),
            2e-3,
            2000.0,
            1000.0,
            1000,
            vec![1, 2, 4, 10, 20, 40, 80, 120, 160, 200],
            11,
        ),
        "lorenz-desk" => (
            builtin(BenchmarkId::Lorenz3D),
            5e-4,
            300.0,
            100.0,
            100,
            vec![20, 40, 80, 160, 240, 320, 400],
            13,
        ),
        "lorenz-paper" => (
            builtin(BenchmarkId::Lorenz3D),
            5e-4,
            3000.0,
            1000.0,
            1000,
            vec![20, 40, 80, 160, 240, 320, 400],
            13,
        ),
        other => {
            return Err(CliError::Config(format!(
                "unknown preset `{other}` (available: double-well-desk, double-well-paper, \
                 gradient-2d-desk, gradient-2d-paper, lorenz-desk, lorenz-paper)"
            )))
        }
    };
    let convergence_gap = gaps[gaps.len() / 2];
    let cfg = ExperimentConfig {
        seed,
        system,
        data: DataSection {
            dt,
            t_long,
            horizon,
            trajectories,
            gaps,
            burn_in_fraction: default_burn_in_fraction(),
            blowup_threshold: default_blowup_threshold(),
        },
        inference: InferenceSection::default(),
        stats: StatsSection::default(),
        study: StudySection {
            family: Some(FamilyChoice { family: FamilyKind::IsRk4, include_c0: false }),
            convergence_gap: Some(convergence_gap),
            convergence_grid: None,
            scan_schemes: Some(vec![
                "plain-rk4".into(),
                "plain-ssbe".into(),
                "is-rk4".into(),
                "is-ssbe".into(),
            ]),
        },
        output: OutputSection { dir: PathBuf::from(format!("out/{name}")) },
    };
    cfg.validate()?;
    Ok(cfg)
}

fn builtin(id: BenchmarkId) -> SystemSection {
    SystemSection { builtin: Some(id), linear: None }
}

/// Loads `-c <path>` or `--preset <name>`, exactly one of which must be set;
/// `--out` overrides the output directory.
pub fn load_config(
    config: Option<&Path>,
    preset_name: Option<&str>,
    out_override: Option<&Path>,
) -> CliResult<ExperimentConfig> {
    let mut cfg = match (config, preset_name) {
        (Some(path), None) => ExperimentConfig::from_path(path)?,
        (None, Some(name)) => preset(name)?,
        _ => {
            return Err(CliError::Config(
                "pass exactly one of --config <file> or --preset <name>".into(),
            ))
        }
    };
    if let Some(dir) = out_override {
        cfg.output.dir = dir.to_path_buf();
    }
    Ok(cfg)
}

/// Labels for plain schemes accepted by the blow-up scan.
pub fn parse_plain_scheme(label: &str) -> Option<isalt_core::integrators::SchemeKind> {
    match label {
        "plain-em" => Some(isalt_core::integrators::SchemeKind::Em),
        "plain-rk4" => Some(isalt_core::integrators::SchemeKind::Hrk4),
        "plain-ssbe" => Some(isalt_core::integrators::SchemeKind::Ssbe),
        _ => None,
    }
}

/// Family labels like `is-rk4` or `is-ssbe-c0`.
pub fn parse_family_label(label: &str) -> Option<FamilyChoice> {
    let (family_part, include_c0) = match label.strip_suffix("-c0") {
        Some(stem) => (stem, true),
        None => (label, false),
    };
    FamilyKind::from_str(family_part)
        .ok()
        .map(|family| FamilyChoice { family, include_c0 })
}
