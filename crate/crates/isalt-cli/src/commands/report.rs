//! `isalt report`: aggregate the summaries produced by evaluate and the
//! studies into one report.json plus a human-readable digest on stdout.

use serde_json::{json, Value};

use super::*;
use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::manifest::Manifest;

fn load_json(manifest: &Manifest, dir: &std::path::Path, name: &str) -> CliResult<Option<Value>> {
    if !manifest.artifacts.iter().any(|a| a.name == name) {
        return Ok(None);
    }
    let path = manifest.resolve(dir, name)?;
    let text = std::fs::read_to_string(&path).map_err(CliError::io(&path))?;
    let value = serde_json::from_str(&text)
        .map_err(|e| CliError::Numerical(format!("{}: {e}", path.display())))?;
    Ok(Some(value))
}

pub fn run(cfg: &ExperimentConfig) -> CliResult<()> {
    let dir = cfg.output.dir.clone();
    let mut manifest = Manifest::load(&dir)?;

    let mut sections = serde_json::Map::new();
    let mut digest = Vec::new();

    // scheme inventory
    let scheme_names: Vec<String> = manifest
        .names_with_kind("scheme")
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut schemes = Vec::new();
    for name in &scheme_names {
        let path = manifest.resolve(&dir, name)?;
        let scheme = isalt_core::inference::InferredScheme::read_json(&path)
            .map_err(|e| CliError::Numerical(format!("{}: {e}", path.display())))?;
        schemes.push(json!({
            "name": name,
            "family": scheme.label(),
            "gap": scheme.gap,
            "delta": scheme.delta,
            "coefficients": scheme.coefficients,
            "sigma_eta": scheme.sigma_eta,
        }));
    }
    digest.push(format!("schemes inferred: {}", schemes.len()));
    sections.insert("schemes".into(), Value::Array(schemes));

    if let Some(eval) = load_json(&manifest, &dir, "eval-summary")? {
        if let Some(rows) = eval.get("rows").and_then(|r| r.as_array()) {
            // best gap per family by coordinate-0 TVD
            let mut per_family: std::collections::BTreeMap<String, (u64, f64)> = Default::default();
            for row in rows {
                let family = row["family"].as_str().unwrap_or_default().to_string();
                let gap = row["gap"].as_u64().unwrap_or(0);
                let tvd = row["tvd"][0].as_f64().unwrap_or(1.0);
                per_family
                    .entry(family)
                    .and_modify(|best| {
                        if tvd < best.1 {
                            *best = (gap, tvd);
                        }
                    })
                    .or_insert((gap, tvd));
            }
            for (family, (gap, tvd)) in &per_family {
                digest.push(format!("{family}: best TVD {tvd:.4} at gap {gap}"));
            }
        }
        sections.insert("evaluation".into(), eval);
    }
    if let Some(conv) = load_json(&manifest, &dir, "study-convergence-summary")? {
        digest.push(format!(
            "convergence slope: {} ({})",
            conv["slope"],
            conv["family"].as_str().unwrap_or("?")
        ));
        sections.insert("convergence".into(), conv);
    }
    if let Some(res) = load_json(&manifest, &dir, "study-residual-order-summary")? {
        if let Some(families) = res.get("families").and_then(|f| f.as_array()) {
            for fam in families {
                digest.push(format!(
                    "residual order {}: slopes {}",
                    fam["family"].as_str().unwrap_or("?"),
                    fam["slopes"]
                ));
            }
        }
        sections.insert("residual_order".into(), res);
    }
    if let Some(blow) = load_json(&manifest, &dir, "study-blowup-summary")? {
        if let Some(firsts) = blow.get("first_blowup_gap").and_then(|f| f.as_array()) {
            for pair in firsts {
                let label = pair[0].as_str().unwrap_or("?");
                match pair[1].as_u64() {
                    Some(gap) => digest.push(format!("{label}: first blow-up at gap {gap}")),
                    None => digest.push(format!("{label}: stable across all scanned gaps")),
                }
            }
        }
        sections.insert("blowup".into(), blow);
    }

    let report = Value::Object(sections);
    let mut text = serde_json::to_string_pretty(&report)
        .map_err(|e| CliError::Numerical(e.to_string()))?;
    text.push('\n');
    write_text(&dir, "report.json", &text)?;
    manifest.record(&dir, "report", "summary", "report.json")?;
    manifest.write(&dir)?;

    println!("report for {}:", dir.display());
    for line in digest {
        println!("  {line}");
    }
    println!("  full report: {}", dir.join("report.json").display());
    Ok(())
}
