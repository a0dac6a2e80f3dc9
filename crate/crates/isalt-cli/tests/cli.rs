//! End-to-end tests of the `isalt` binary: the full command pipeline on a
//! tiny experiment, exit codes, artifact determinism, and the manifest's
//! fail-fast behavior.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn isalt() -> Command {
    Command::new(env!("CARGO_BIN_EXE_isalt"))
}

fn run_ok(args: &[&str]) -> Output {
    let out = isalt().args(args).output().expect("binary runs");
    assert!(
        out.status.success(),
        "`isalt {}` failed\nstdout: {}\nstderr: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn exit_code(args: &[&str]) -> i32 {
    isalt()
        .args(args)
        .output()
        .expect("binary runs")
        .status
        .code()
        .expect("no signal")
}

fn write_config(dir: &Path, out_dir: &Path) -> PathBuf {
    let path = dir.join("cfg.toml");
    let text = format!(
        r#"
seed = 42

[system]
builtin = "double-well-1d"

[data]
dt = 0.001
t_long = 5.0
horizon = 2.0
trajectories = 3
gaps = [2, 4, 8]

[[inference.families]]
family = "is-em"
include_c0 = false

[[inference.families]]
family = "is-rk4"
include_c0 = true

[stats]
bins = 30
max_lag = 10
sim_steps = 4000
blowup_seeds = 2
blowup_steps = 2000

[study]
family = {{ family = "is-rk4", include_c0 = true }}
convergence_gap = 2
convergence_grid = [[1, 500], [2, 1000], [3, 1000]]
scan_schemes = ["plain-em", "is-em"]

[output]
dir = "{}"
"#,
        out_dir.display()
    );
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn full_pipeline_produces_all_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    let cfg = write_config(tmp.path(), &out_dir);
    let cfg = cfg.to_str().unwrap();

    run_ok(&["gen-data", "-c", cfg]);
    run_ok(&["infer", "-c", cfg]);
    run_ok(&["evaluate", "-c", cfg]);
    run_ok(&["study", "convergence", "-c", cfg]);
    run_ok(&["study", "residual-order", "-c", cfg]);
    run_ok(&["study", "blowup-scan", "-c", cfg]);
    let report = run_ok(&["report", "-c", cfg]);
    let stdout = String::from_utf8_lossy(&report.stdout);
    assert!(stdout.contains("schemes inferred: 6"), "report said: {stdout}");

    for file in [
        "manifest.json",
        "reference.isalt",
        "reference.isalt.json",
        "data-gap-2.isalt",
        "data-gap-4.isalt",
        "scheme-is-em-gap-2.json",
        "scheme-is-rk4-c0-gap-4.json",
        "estimators-is-em.csv",
        "estimators-is-rk4-c0.csv",
        "tvd-vs-gap.csv",
        "eval-is-em-gap-2-pdf.csv",
        "eval-is-rk4-c0-gap-4-acf.csv",
        "eval-blowups.csv",
        "eval-summary.json",
        "study-convergence.csv",
        "study-convergence-summary.json",
        "study-residual-order.csv",
        "study-blowup.csv",
        "study-blowup-summary.json",
        "report.json",
    ] {
        assert!(out_dir.join(file).exists(), "missing artifact {file}");
    }

    // every artifact the manifest lists verifies against its checksum
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("manifest.json")).unwrap())
            .unwrap();
    let artifacts = manifest["artifacts"].as_array().unwrap();
    assert!(artifacts.len() >= 20);

    // the tvd table has one column per (family, coordinate) and one row per gap
    let tvd = std::fs::read_to_string(out_dir.join("tvd-vs-gap.csv")).unwrap();
    let mut lines = tvd.lines();
    assert_eq!(lines.next().unwrap(), "gap,delta,is-em_x0,is-rk4-c0_x0");
    assert_eq!(lines.count(), 3);
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let out_a = tmp.path().join("a");
    let out_b = tmp.path().join("b");
    let cfg_a = write_config(tmp.path(), &out_a);
    run_ok(&["gen-data", "-c", cfg_a.to_str().unwrap()]);
    run_ok(&["infer", "-c", cfg_a.to_str().unwrap()]);
    let cfg_b = {
        let p = tmp.path().join("cfg_b.toml");
        let text = std::fs::read_to_string(&cfg_a)
            .unwrap()
            .replace(&out_a.display().to_string(), &out_b.display().to_string());
        std::fs::write(&p, text).unwrap();
        p
    };
    run_ok(&["gen-data", "-c", cfg_b.to_str().unwrap()]);
    run_ok(&["infer", "-c", cfg_b.to_str().unwrap()]);
    for file in ["reference.isalt", "data-gap-2.isalt", "data-gap-4.isalt", "scheme-is-em-gap-2.json", "estimators-is-rk4-c0.csv"] {
        let a = std::fs::read(out_a.join(file)).unwrap();
        let b = std::fs::read(out_b.join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between identical runs");
    }
}

#[test]
fn exit_codes_follow_the_contract() {
    let tmp = tempfile::tempdir().unwrap();
    // 2: config errors
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "this is not a config").unwrap();
    assert_eq!(exit_code(&["gen-data", "-c", bad.to_str().unwrap()]), 2);
    assert_eq!(exit_code(&["gen-data", "--preset", "no-such-preset"]), 2);
    assert_eq!(exit_code(&["gen-data"]), 2); // neither config nor preset

    // gaps not ascending
    let out_dir = tmp.path().join("out");
    let cfg = write_config(tmp.path(), &out_dir);
    let descending =
        std::fs::read_to_string(&cfg).unwrap().replace("gaps = [2, 4, 8]", "gaps = [8, 4, 2]");
    let cfg2 = tmp.path().join("cfg2.toml");
    std::fs::write(&cfg2, descending).unwrap();
    assert_eq!(exit_code(&["gen-data", "-c", cfg2.to_str().unwrap()]), 2);

    // 4: inferring without data (no manifest yet)
    assert_eq!(exit_code(&["infer", "-c", cfg.to_str().unwrap()]), 4);

    // 4: a listed artifact that was corrupted after writing fails its checksum
    run_ok(&["gen-data", "-c", cfg.to_str().unwrap()]);
    let victim = out_dir.join("data-gap-2.isalt");
    let mut bytes = std::fs::read(&victim).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0xff;
    std::fs::write(&victim, bytes).unwrap();
    assert_eq!(exit_code(&["infer", "-c", cfg.to_str().unwrap()]), 4);
}

#[test]
fn empty_family_list_is_a_warning_noop() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    let cfg = write_config(tmp.path(), &out_dir);
    let text = std::fs::read_to_string(&cfg).unwrap();
    let trimmed: String = text
        .lines()
        .filter(|l| !l.contains("family") && !l.contains("include_c0"))
        .collect::<Vec<_>>()
        .join("\n")
        .replace("[[inference.families]]", "")
        + "\n[inference]\nfamilies = []\n";
    let cfg2 = tmp.path().join("nofam.toml");
    std::fs::write(&cfg2, trimmed).unwrap();
    run_ok(&["gen-data", "-c", cfg2.to_str().unwrap()]);
    let out = isalt()
        .args(["infer", "-c", cfg2.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
}

#[test]
fn simulate_exports_a_readable_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    let cfg = write_config(tmp.path(), &out_dir);
    run_ok(&["gen-data", "-c", cfg.to_str().unwrap()]);
    run_ok(&["infer", "-c", cfg.to_str().unwrap()]);
    let scheme = out_dir.join("scheme-is-rk4-c0-gap-4.json");
    let export = tmp.path().join("path.isalt");
    run_ok(&[
        "simulate",
        "-s",
        scheme.to_str().unwrap(),
        "-n",
        "500",
        "--seed",
        "9",
        "--record-every",
        "5",
        "-o",
        export.to_str().unwrap(),
    ]);
    let ds = isalt_core::datagen::read_dataset(&export).unwrap();
    assert_eq!(ds.num_trajectories(), 1);
    assert_eq!(ds.num_steps(), 100);
    assert_eq!(ds.gap, 5);
    assert!(ds.all_finite());

    // deterministic: same invocation, same bytes
    let export2 = tmp.path().join("path2.isalt");
    run_ok(&[
        "simulate",
        "-s",
        scheme.to_str().unwrap(),
        "-n",
        "500",
        "--seed",
        "9",
        "--record-every",
        "5",
        "-o",
        export2.to_str().unwrap(),
    ]);
    assert_eq!(std::fs::read(&export).unwrap(), std::fs::read(&export2).unwrap());
}

#[test]
fn linear_system_configs_work_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    let text = format!(
        r#"
seed = 5

[system.linear]
name = "ou-1d"
matrix = [[-1.0]]
diffusion = [[1.0]]
beta = 1.0

[data]
dt = 0.01
t_long = 20.0
horizon = 10.0
trajectories = 4
gaps = [5, 10]

[[inference.families]]
family = "is-em"
include_c0 = false

[stats]
bins = 30
max_lag = 10
sim_steps = 3000
blowup_seeds = 2
blowup_steps = 1000

[output]
dir = "{}"
"#,
        out_dir.display()
    );
    let cfg = tmp.path().join("ou.toml");
    std::fs::write(&cfg, text).unwrap();
    run_ok(&["gen-data", "-c", cfg.to_str().unwrap()]);
    run_ok(&["infer", "-c", cfg.to_str().unwrap()]);
    run_ok(&["evaluate", "-c", cfg.to_str().unwrap()]);
    // the scheme file embeds the linear system, so simulate is self-contained
    let scheme = out_dir.join("scheme-is-em-gap-5.json");
    run_ok(&["simulate", "-s", scheme.to_str().unwrap(), "-n", "100", "--seed", "1"]);
    // fitted drift coefficient approximates the OU projection (1-e^-ad)/(ad)
    let parsed = isalt_core::inference::InferredScheme::read_json(&scheme).unwrap();
    let delta = 0.05;
    let oracle = (1.0 - (-delta as f64).exp()) / delta;
    assert!(
        (parsed.coefficients[0][0] - oracle).abs() < 0.2,
        "c1 = {} vs {oracle}",
        parsed.coefficients[0][0]
    );
}
