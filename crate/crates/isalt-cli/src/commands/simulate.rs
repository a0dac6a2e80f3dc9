//! `isalt simulate`: run one inferred scheme from its JSON file, optionally
//! exporting the path in the dataset container format.

use std::path::Path;

use isalt_core::datagen::write_dataset;
use isalt_core::inference::InferredScheme;
use isalt_core::sim::{simulate_with_system, SimConfig};
use nalgebra::DVector;

use crate::error::{CliError, CliResult};

pub struct SimulateArgs<'a> {
    pub scheme: &'a Path,
    pub steps: usize,
    pub seed: u64,
    pub record_every: usize,
    pub x0: Option<String>,
    pub out: Option<&'a Path>,
}

pub fn run(args: &SimulateArgs) -> CliResult<()> {
    let scheme = InferredScheme::read_json(args.scheme)
        .map_err(|e| CliError::Config(format!("{}: {e}", args.scheme.display())))?;
    let system = scheme.system.resolve().map_err(|e| {
        CliError::Config(format!(
            "scheme's system `{}` is not reconstructible ({e}); re-export it from a config-described system",
            scheme.system.name()
        ))
    })?;
    let x0 = match &args.x0 {
        Some(text) => {
            let values: Result<Vec<f64>, _> =
                text.split(',').map(|v| v.trim().parse::<f64>()).collect();
            let values =
                values.map_err(|e| CliError::Config(format!("cannot parse --x0: {e}")))?;
            if values.len() != system.dim() {
                return Err(CliError::Config(format!(
                    "--x0 has {} entries but the system has dimension {}",
                    values.len(),
                    system.dim()
                )));
            }
            DVector::from_column_slice(&values)
        }
        None => system.default_x0(),
    };
    let cfg = SimConfig {
        scheme,
        x0: vec![x0],
        steps: args.steps,
        seed: args.seed,
        blowup_threshold: 1e10,
        record_every: args.record_every,
        record_noise: args.out.is_some(),
    };
    let out = simulate_with_system(&cfg, &system).map_err(|e| CliError::Numerical(e.to_string()))?;
    let path = &out.paths[0];
    match path.blowup_step {
        Some(step) => {
            println!(
                "trajectory blew up at step {step} of {} (recorded {} states)",
                args.steps,
                path.states.len()
            );
            if args.out.is_some() {
                return Err(CliError::Numerical(
                    "cannot export a blown-up trajectory".into(),
                ));
            }
        }
        None => {
            let last = path.states.last().expect("at least the initial state");
            println!(
                "simulated {} steps at delta = {} (recorded {} states, final state {:?})",
                args.steps,
                cfg.scheme.delta,
                path.states.len(),
                last.iter().collect::<Vec<_>>()
            );
        }
    }
    if let Some(out_path) = args.out {
        let dataset = out
            .to_dataset(system.name(), system.noise_dim(), args.seed)
            .map_err(|e| CliError::Numerical(e.to_string()))?;
        write_dataset(&dataset, out_path).map_err(|e| CliError::Numerical(e.to_string()))?;
        println!("wrote {}", out_path.display());
    }
    Ok(())
}
