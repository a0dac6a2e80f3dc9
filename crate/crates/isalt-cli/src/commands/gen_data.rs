//! `isalt gen-data`: reference long trajectory plus one downsampled dataset
//! per gap, all recorded in the manifest with checksums.

use isalt_core::datagen::{
    generate_dataset, generate_long_trajectory, sample_initial_conditions, write_dataset,
    GenerationConfig, TrajectoryDataset,
};
use isalt_core::integrators::ImplicitSolverOptions;

use super::*;
use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::manifest::Manifest;

pub fn run(cfg: &ExperimentConfig) -> CliResult<()> {
    let system = cfg.resolve_system()?;
    let dir = cfg.output.dir.clone();
    ensure_dir(&dir)?;
    let mut manifest = Manifest::load_or_default(&dir)?;

    let long_steps = cfg.long_steps();
    println!(
        "generating reference trajectory: {} fine steps at dt = {}",
        long_steps, cfg.data.dt
    );
    let long = generate_long_trajectory(
        &system,
        &system.default_x0(),
        cfg.data.dt,
        long_steps,
        long_seed(cfg.seed),
        &ImplicitSolverOptions::default(),
    )
    .map_err(|e| CliError::Numerical(format!("reference trajectory failed: {e}")))?;

    // persist the reference in the dataset container (single trajectory,
    // gap 1, no noise columns)
    let reference = TrajectoryDataset::from_parts(
        system.dim(),
        0,
        1,
        long.len() - 1,
        cfg.data.dt,
        1,
        long.seed,
        system.name().to_string(),
        long.states_flat().to_vec(),
        Vec::new(),
    )
    .map_err(|e| CliError::Numerical(e.to_string()))?;
    write_dataset(&reference, &dir.join("reference.isalt"))
        .map_err(|e| CliError::Numerical(e.to_string()))?;
    manifest.record(&dir, "reference", "reference", "reference.isalt")?;

    let burn_in = cfg.burn_in_long();
    for &gap in &cfg.data.gaps {
        let initials = sample_initial_conditions(
            &long,
            cfg.data.trajectories,
            burn_in,
            initials_seed(cfg.seed, gap),
        )
        .map_err(|e| CliError::Config(e.to_string()))?;
        let mut gen = GenerationConfig::new(
            system.clone(),
            cfg.data.dt,
            cfg.horizon_steps(gap),
            gap,
            cfg.data.trajectories,
            dataset_seed(cfg.seed, gap),
        );
        gen.blowup_threshold = cfg.data.blowup_threshold;
        let dataset = generate_dataset(&gen, &initials)
            .map_err(|e| CliError::Numerical(format!("gap {gap}: {e}")))?;
        let (name, file) = dataset_artifact(gap);
        write_dataset(&dataset, &dir.join(&file))
            .map_err(|e| CliError::Numerical(e.to_string()))?;
        manifest.record(&dir, &name, "dataset", &file)?;
        println!(
            "gap {gap:4}: M = {}, N = {}, delta = {}",
            dataset.num_trajectories(),
            dataset.num_steps(),
            dataset.delta()
        );
    }
    manifest.write(&dir)?;
    println!("wrote {} artifacts to {}", manifest.artifacts.len(), dir.display());
    Ok(())
}
