//! `isalt study {convergence|residual-order|blowup-scan}`: estimator and
//! residual diagnostics, plus the plain-vs-inferred blow-up table.

use isalt_core::basis::BasisFamily;
use isalt_core::inference::{convergence_study, residual_order_study, InferredScheme};
use isalt_core::integrators::ImplicitSolverOptions;
use isalt_core::stats::{blowup_scan, ScanCell, ScanRow, ScanScheme};
use serde::Serialize;

use super::*;
use crate::config::{parse_family_label, parse_plain_scheme, ExperimentConfig, FamilyChoice};
use crate::error::{CliError, CliResult};
use crate::manifest::Manifest;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum StudyKind {
    Convergence,
    ResidualOrder,
    BlowupScan,
}

pub fn run(cfg: &ExperimentConfig, kind: StudyKind) -> CliResult<()> {
    match kind {
        StudyKind::Convergence => convergence(cfg),
        StudyKind::ResidualOrder => residual_order(cfg),
        StudyKind::BlowupScan => scan(cfg),
    }
}

#[derive(Serialize)]
struct ConvergenceSummary {
    family: String,
    gap: usize,
    grid: Vec<(usize, usize)>,
    slope: Option<f64>,
    reference_coefficients: Vec<Vec<f64>>,
}

fn convergence(cfg: &ExperimentConfig) -> CliResult<()> {
    let system = cfg.resolve_system()?;
    let dir = cfg.output.dir.clone();
    let mut manifest = Manifest::load(&dir)?;
    let choice = cfg
        .study
        .family
        .clone()
        .unwrap_or(FamilyChoice { family: isalt_core::basis::FamilyKind::IsRk4, include_c0: false });
    let gap = cfg
        .study
        .convergence_gap
        .unwrap_or(cfg.data.gaps[cfg.data.gaps.len() / 2]);
    if !cfg.data.gaps.contains(&gap) {
        return Err(CliError::Config(format!(
            "study.convergence_gap {gap} is not one of data.gaps"
        )));
    }
    let (name, _) = dataset_artifact(gap);
    let dataset = read_dataset_artifact(&manifest, &dir, &name)?;
    let n = dataset.num_steps();
    let m = dataset.num_trajectories();
    let grid = cfg.study.convergence_grid.clone().unwrap_or_else(|| {
        vec![((m / 100).max(1), n), ((m / 10).max(1), n), (m, n)]
    });
    let fam = BasisFamily::new(choice.family, choice.include_c0, dataset.delta(), system)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let report = convergence_study(&dataset, &fam, &grid, cfg.inference.svd_cutoff)
        .map_err(|e| CliError::Config(e.to_string()))?;

    let mut csv = String::from("trajectories,steps,sample_count,aggregate_error");
    let d = report.reference.len();
    let p1 = report.reference[0].len();
    for k in 0..d {
        for i in 0..p1 {
            csv.push_str(&format!(",rel_err_c{i}_x{k}"));
        }
    }
    csv.push('\n');
    for row in &report.rows {
        csv.push_str(&format!(
            "{},{},{},{}",
            row.trajectories, row.steps, row.sample_count, row.aggregate_error
        ));
        for k in 0..d {
            for i in 0..p1 {
                csv.push_str(&format!(",{}", row.relative_errors[k][i]));
            }
        }
        csv.push('\n');
    }
    write_text(&dir, "study-convergence.csv", &csv)?;
    manifest.record(&dir, "study-convergence", "table", "study-convergence.csv")?;

    let summary = ConvergenceSummary {
        family: choice.label(),
        gap,
        grid,
        slope: report.slope,
        reference_coefficients: report.reference,
    };
    let mut json =
        serde_json::to_string_pretty(&summary).map_err(|e| CliError::Numerical(e.to_string()))?;
    json.push('\n');
    write_text(&dir, "study-convergence-summary.json", &json)?;
    manifest.record(
        &dir,
        "study-convergence-summary",
        "summary",
        "study-convergence-summary.json",
    )?;
    manifest.write(&dir)?;
    println!(
        "convergence study ({} gap {gap}): slope {:?}",
        summary.family, summary.slope
    );
    Ok(())
}

#[derive(Serialize)]
struct ResidualOrderSummary {
    families: Vec<ResidualOrderFamily>,
}

#[derive(Serialize)]
struct ResidualOrderFamily {
    family: String,
    slopes: Vec<Option<f64>>,
    plateau_ratios: Vec<f64>,
}

fn residual_order(cfg: &ExperimentConfig) -> CliResult<()> {
    if cfg.data.gaps.len() < 3 {
        return Err(CliError::Config(
            "residual-order study needs at least 3 gaps in data.gaps".into(),
        ));
    }
    let system = cfg.resolve_system()?;
    let dir = cfg.output.dir.clone();
    let mut manifest = Manifest::load(&dir)?;
    let datasets: Vec<_> = cfg
        .data
        .gaps
        .iter()
        .map(|&gap| read_dataset_artifact(&manifest, &dir, &dataset_artifact(gap).0))
        .collect::<CliResult<_>>()?;
    let refs: Vec<&_> = datasets.iter().collect();

    let d = system.dim();
    let mut csv = String::from("family,gap,delta");
    for k in 0..d {
        csv.push_str(&format!(",sigma_eta_x{k}"));
    }
    csv.push('\n');
    let mut families = Vec::new();
    for choice in &cfg.inference.families {
        let report = residual_order_study(
            &refs,
            choice.family,
            choice.include_c0,
            &system,
            cfg.inference.svd_cutoff,
        )
        .map_err(|e| CliError::Numerical(format!("{}: {e}", choice.label())))?;
        for row in &report.rows {
            csv.push_str(&format!("{},{},{}", choice.label(), row.gap, row.delta));
            for v in &row.sigma_eta {
                csv.push_str(&format!(",{v}"));
            }
            csv.push('\n');
        }
        let plateau = (0..d).map(|k| report.plateau_ratio(k)).collect();
        println!(
            "residual order {}: slopes {:?} plateau ratios {:?}",
            choice.label(),
            report.slopes,
            plateau
        );
        families.push(ResidualOrderFamily {
            family: choice.label(),
            slopes: report.slopes,
            plateau_ratios: plateau,
        });
    }
    write_text(&dir, "study-residual-order.csv", &csv)?;
    manifest.record(&dir, "study-residual-order", "table", "study-residual-order.csv")?;
    let mut json = serde_json::to_string_pretty(&ResidualOrderSummary { families })
        .map_err(|e| CliError::Numerical(e.to_string()))?;
    json.push('\n');
    write_text(&dir, "study-residual-order-summary.json", &json)?;
    manifest.record(
        &dir,
        "study-residual-order-summary",
        "summary",
        "study-residual-order-summary.json",
    )?;
    manifest.write(&dir)
}

#[derive(Serialize)]
struct ScanSummary {
    steps: usize,
    seeds: usize,
    first_blowup_gap: Vec<(String, Option<usize>)>,
}

fn scan(cfg: &ExperimentConfig) -> CliResult<()> {
    let system = cfg.resolve_system()?;
    let dir = cfg.output.dir.clone();
    let mut manifest = Manifest::load(&dir)?;
    let labels = cfg.study.scan_schemes.clone().unwrap_or_else(|| {
        let mut v = vec!["plain-rk4".to_string(), "plain-ssbe".to_string()];
        v.extend(cfg.inference.families.iter().map(|c| c.label()));
        v
    });

    let mut rows = Vec::new();
    for label in &labels {
        let cells: Vec<ScanCell> = if let Some(kind) = parse_plain_scheme(label) {
            cfg.data
                .gaps
                .iter()
                .map(|&gap| ScanCell {
                    gap,
                    delta: gap as f64 * cfg.data.dt,
                    scheme: ScanScheme::Plain(kind),
                })
                .collect()
        } else if parse_family_label(label).is_some() {
            cfg.data
                .gaps
                .iter()
                .map(|&gap| -> CliResult<ScanCell> {
                    let (name, _) = scheme_artifact(label, gap);
                    let path = manifest.resolve(&dir, &name)?;
                    let scheme = InferredScheme::read_json(&path)
                        .map_err(|e| CliError::Numerical(format!("{}: {e}", path.display())))?;
                    Ok(ScanCell {
                        gap,
                        delta: scheme.delta,
                        scheme: ScanScheme::Inferred(scheme),
                    })
                })
                .collect::<CliResult<_>>()?
        } else {
            return Err(CliError::Config(format!(
                "unknown scan scheme `{label}` (use plain-em/plain-rk4/plain-ssbe or a family label)"
            )));
        };
        rows.push(ScanRow { label: label.clone(), cells });
    }

    let seeds: Vec<u64> = (0..cfg.stats.blowup_seeds).map(|i| scan_seed(cfg.seed, i)).collect();
    let table = blowup_scan(
        &system,
        &rows,
        &system.default_x0(),
        cfg.stats.blowup_steps,
        &seeds,
        &ImplicitSolverOptions::default(),
        cfg.data.blowup_threshold,
    )
    .map_err(|e| CliError::Numerical(e.to_string()))?;

    let mut csv = String::from("scheme,gap,delta,blew_up,first_blowup_step\n");
    for e in &table.entries {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            e.label,
            e.gap,
            e.delta,
            e.blew_up,
            e.first_blowup_step.map_or(String::new(), |s| s.to_string())
        ));
        println!(
            "scan {:12} gap {:4}: {}",
            e.label,
            e.gap,
            if e.blew_up { "blew up" } else { "stable" }
        );
    }
    write_text(&dir, "study-blowup.csv", &csv)?;
    manifest.record(&dir, "study-blowup", "table", "study-blowup.csv")?;
    let summary = ScanSummary {
        steps: table.steps,
        seeds: table.seeds,
        first_blowup_gap: labels
            .iter()
            .map(|l| (l.clone(), table.first_blowup_gap(l)))
            .collect(),
    };
    let mut json =
        serde_json::to_string_pretty(&summary).map_err(|e| CliError::Numerical(e.to_string()))?;
    json.push('\n');
    write_text(&dir, "study-blowup-summary.json", &json)?;
    manifest.record(&dir, "study-blowup-summary", "summary", "study-blowup-summary.json")?;
    manifest.write(&dir)
}
