//! `isalt infer`: fit every configured (family, gap) pair, write one scheme
//! file per pair plus a per-family estimator table with single-trajectory
//! spreads.

use isalt_core::basis::BasisFamily;
use isalt_core::inference::{infer_with, per_trajectory_coefficients, InferOptions};

use super::*;
use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::manifest::Manifest;

pub fn run(cfg: &ExperimentConfig) -> CliResult<()> {
    if cfg.inference.families.is_empty() {
        eprintln!("warning: inference.families is empty; nothing to do");
        return Ok(());
    }
    let system = cfg.resolve_system()?;
    let dir = cfg.output.dir.clone();
    let mut manifest = Manifest::load(&dir)?;

    for choice in &cfg.inference.families {
        let label = choice.label();
        let mut table = String::new();
        let mut header_done = false;
        for &gap in &cfg.data.gaps {
            let (ds_name, _) = dataset_artifact(gap);
            let dataset = read_dataset_artifact(&manifest, &dir, &ds_name)?;
            let fam = BasisFamily::new(choice.family, choice.include_c0, dataset.delta(), system.clone())
                .map_err(|e| CliError::Config(e.to_string()))?;
            let scheme = infer_with(
                &dataset,
                &fam,
                &InferOptions {
                    svd_cutoff: cfg.inference.svd_cutoff,
                    dataset_label: Some(ds_name.clone()),
                    system_spec: Some(cfg.system_spec()),
                },
            )
            .map_err(|e| CliError::Numerical(format!("{label} gap {gap}: {e}")))?;
            for note in &scheme.provenance.rank_notes {
                eprintln!(
                    "note: {label} gap {gap}: coordinate {} is rank deficient ({}/{})",
                    note.coordinate, note.rank, note.basis_count
                );
            }

            // single-trajectory estimator spread per coefficient
            let singles = per_trajectory_coefficients(&dataset, &fam, cfg.inference.svd_cutoff)
                .map_err(|e| CliError::Numerical(format!("{label} gap {gap}: {e}")))?;
            let d = system.dim();
            let p1 = fam.basis_count();
            let mut spread = vec![vec![0.0f64; p1]; d];
            if singles.len() > 1 {
                for k in 0..d {
                    for i in 0..p1 {
                        let mean: f64 =
                            singles.iter().map(|c| c[(k, i)]).sum::<f64>() / singles.len() as f64;
                        let var: f64 = singles
                            .iter()
                            .map(|c| (c[(k, i)] - mean).powi(2))
                            .sum::<f64>()
                            / (singles.len() - 1) as f64;
                        spread[k][i] = var.sqrt();
                    }
                }
            }

            if !header_done {
                table.push_str("gap,delta");
                for k in 0..d {
                    for i in 0..p1 {
                        table.push_str(&format!(",c{i}_x{k},std_c{i}_x{k}"));
                    }
                    table.push_str(&format!(",sigma_eta_x{k}"));
                }
                table.push('\n');
                header_done = true;
            }
            table.push_str(&format!("{gap},{}", scheme.delta));
            for k in 0..d {
                for i in 0..p1 {
                    table.push_str(&format!(",{},{}", scheme.coefficients[k][i], spread[k][i]));
                }
                table.push_str(&format!(",{}", scheme.sigma_eta[k]));
            }
            table.push('\n');

            let (name, file) = scheme_artifact(&label, gap);
            scheme
                .write_json(&dir.join(&file))
                .map_err(|e| CliError::Numerical(e.to_string()))?;
            manifest.record(&dir, &name, "scheme", &file)?;
            println!(
                "{label} gap {gap:4}: c[0] = {:?}, sigma_eta = {:?}",
                scheme.coefficients[0], scheme.sigma_eta
            );
        }
        let table_file = format!("estimators-{label}.csv");
        write_text(&dir, &table_file, &table)?;
        manifest.record(&dir, &format!("estimators-{label}"), "table", &table_file)?;
    }
    manifest.write(&dir)
}
