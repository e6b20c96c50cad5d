//! End-to-end tests of the `mpf` binary: file outputs, exit codes and
//! reproducibility.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn mpf() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mpf"))
}

fn run(args: &[&str]) -> Output {
    mpf().args(args).output().expect("binary runs")
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

/// Damped 2-state oscillator used across the CLI tests.
fn write_system(dir: &Path) -> PathBuf {
    let path = dir.join("system.json");
    write(
        &path,
        r#"{"labels": ["speed", "angle"], "A": [[0.0, 1.0], [-2.0, -0.1]]}"#,
    );
    path
}

/// Mirrored parallelotope vertices at two scales: every selected pair is a
/// vertex pair, which is the exact regime of the pipeline.
fn simulate_config(dir: &Path, seed: u64) -> PathBuf {
    let system = write_system(dir);
    let data_dir = dir.join("data");
    let config = dir.join("simulate.json");
    let states = "[[-0.5,-0.5],[0.5,-0.5],[-0.5,0.5],[0.5,0.5],[-1.5,-1.5],[1.5,-1.5],[-1.5,1.5],[1.5,1.5]]";
    write(
        &config,
        &format!(
            r#"{{
  "system": "{}",
  "dataset": {{ "generate": {{
    "count": 8, "duration": 8.0, "dt": 0.01,
    "sampler": {{ "kind": "explicit", "states": {} }},
    "seed": {}
  }} }},
  "output": {{ "dir": "{}" }}
}}"#,
            system.display(),
            states,
            seed,
            data_dir.display()
        ),
    );
    config
}

fn estimate_config(dir: &Path, mode: &str, extra: &str) -> PathBuf {
    let system = dir.join("system.json");
    let config = dir.join(format!("estimate_{mode}.json"));
    write(
        &config,
        &format!(
            r#"{{
  "system": "{}",
  "dataset": {{ "manifest": "{}" }},
  "symmetry": {{ "r_threshold": 0.001, "candidate_stride": 7 }},
  "prony": {{ "window": 320 }},
  "estimator": {{ "mode": "{mode}", "target_pairs": 4{extra} }},
  "compare": {{ "report": "{}" }},
  "output": {{ "dir": "{}" }}
}}"#,
            system.display(),
            dir.join("data/manifest.json").display(),
            dir.join("run/report.json").display(),
            dir.join("run").display()
        ),
    );
    config
}

#[test]
fn simulate_writes_csvs_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let config = simulate_config(dir.path(), 7);
    let out = run(&["simulate", "--config", config.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let data = dir.path().join("data");
    assert!(data.join("manifest.json").exists());
    let csvs = std::fs::read_dir(&data)
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .path()
                .extension()
                .is_some_and(|x| x == "csv")
        })
        .count();
    assert_eq!(csvs, 8);
    assert!(data.join("config_resolved.json").exists());
}

#[test]
fn same_seed_gives_byte_identical_outputs() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    for dir in [&dir_a, &dir_b] {
        let config = simulate_config(dir.path(), 42);
        let out = run(&["simulate", "--config", config.to_str().unwrap(), "--quiet"]);
        assert!(out.status.success());
    }
    for entry in std::fs::read_dir(dir_a.path().join("data")).unwrap() {
        let path_a = entry.unwrap().path();
        if path_a.extension().is_some_and(|x| x == "csv") {
            let path_b = dir_b.path().join("data").join(path_a.file_name().unwrap());
            let a = std::fs::read(&path_a).unwrap();
            let b = std::fs::read(&path_b).unwrap();
            assert_eq!(a, b, "{} differs", path_a.display());
        }
    }
}

#[test]
fn seed_flag_changes_noisy_outputs() {
    // With noise enabled, different seeds must give different bytes.
    let dir = tempfile::tempdir().unwrap();
    let system = write_system(dir.path());
    let config = dir.path().join("noisy.json");
    write(
        &config,
        &format!(
            r#"{{
  "system": "{}",
  "dataset": {{ "generate": {{
    "count": 2, "duration": 1.0, "dt": 0.01,
    "sampler": {{ "kind": "uniform_box", "half_width": 1.0 }},
    "noise_sigma": 0.01, "seed": 1
  }} }},
  "output": {{ "dir": "{}" }}
}}"#,
            system.display(),
            dir.path().join("n1").display()
        ),
    );
    let out = run(&["simulate", "--config", config.to_str().unwrap(), "--quiet"]);
    assert!(out.status.success());
    let out = run(&[
        "simulate",
        "--config",
        config.to_str().unwrap(),
        "--quiet",
        "--seed",
        "2",
        "--out",
        dir.path().join("n2").to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let a = std::fs::read(dir.path().join("n1/s000.csv")).unwrap();
    let b = std::fs::read(dir.path().join("n2/s000.csv")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn estimate_then_compare_stays_below_half_percent() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate_config(dir.path(), 3);
    assert!(run(&["simulate", "--config", sim.to_str().unwrap(), "--quiet"])
        .status
        .success());
    let est = estimate_config(dir.path(), "full", "");
    let out = run(&["estimate", "--config", est.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report_path = dir.path().join("run/report.json");
    assert!(report_path.exists());
    assert!(dir.path().join("run/report.csv").exists());
    // The printed table lists the state labels.
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("speed") && stdout.contains("angle"));

    let out = run(&["compare", "--config", est.to_str().unwrap(), "--quiet"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("run/comparison.json")).unwrap())
            .unwrap();
    let max_e2 = doc["errors"]["max_abs_e2_percent"].as_f64().unwrap();
    assert!(max_e2 <= 0.5, "max |e2| = {max_e2}%");
}

#[test]
fn reports_embed_the_resolved_config_hash() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate_config(dir.path(), 5);
    assert!(run(&["simulate", "--config", sim.to_str().unwrap(), "--quiet"])
        .status
        .success());
    let est = estimate_config(dir.path(), "full", "");
    assert!(run(&["estimate", "--config", est.to_str().unwrap(), "--quiet"])
        .status
        .success());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("run/report.json")).unwrap())
            .unwrap();
    let hash = report["config_hash"].as_str().unwrap();
    assert_eq!(hash.len(), 64);
}

#[test]
fn blackbox_mode_runs_on_designed_disturbances() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate_config(dir.path(), 11);
    assert!(run(&["simulate", "--config", sim.to_str().unwrap(), "--quiet"])
        .status
        .success());
    let est = estimate_config(dir.path(), "blackbox", "");
    let out = run(&["estimate", "--config", est.to_str().unwrap(), "--quiet"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn missing_manifest_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    write_system(dir.path());
    let est = estimate_config(dir.path(), "full", "");
    let out = run(&["estimate", "--config", est.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_config_key_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.json");
    write(&config, r#"{ "sytem": "x.json" }"#);
    let out = run(&["estimate", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_config_flag_exits_with_code_two() {
    let out = run(&["simulate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn insufficient_data_exits_with_code_four() {
    // Two non-mirrored trajectories cannot support the pipeline.
    let dir = tempfile::tempdir().unwrap();
    let system = write_system(dir.path());
    let sim = dir.path().join("tiny.json");
    write(
        &sim,
        &format!(
            r#"{{
  "system": "{}",
  "dataset": {{ "generate": {{
    "count": 2, "duration": 0.02, "dt": 0.01,
    "sampler": {{ "kind": "explicit", "states": [[1.0, 0.0], [0.0, 1.0]] }},
    "seed": 1
  }} }},
  "output": {{ "dir": "{}" }}
}}"#,
            system.display(),
            dir.path().join("data").display()
        ),
    );
    assert!(run(&["simulate", "--config", sim.to_str().unwrap(), "--quiet"])
        .status
        .success());
    let est = estimate_config(dir.path(), "full", "");
    let out = run(&["estimate", "--config", est.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn diagnose_flags_proportional_signals() {
    // A rank-deficient system: state 2 is exactly proportional to state 1.
    let dir = tempfile::tempdir().unwrap();
    let system = dir.path().join("system.json");
    write(
        &system,
        r#"{"labels": ["a", "b"], "A": [[-0.5, 0.0], [-0.35, 0.0]]}"#,
    );
    let config = dir.path().join("diag.json");
    write(
        &config,
        &format!(
            r#"{{
  "system": "{}",
  "dataset": {{ "generate": {{
    "count": 3, "duration": 4.0, "dt": 0.01,
    "sampler": {{ "kind": "explicit", "states": [[1.0, 0.7]] }},
    "seed": 1
  }} }},
  "output": {{ "dir": "{}" }}
}}"#,
            system.display(),
            dir.path().join("data").display()
        ),
    );
    assert!(run(&["simulate", "--config", config.to_str().unwrap(), "--quiet"])
        .status
        .success());
    let diag = dir.path().join("diagnose.json");
    write(
        &diag,
        &format!(
            r#"{{
  "dataset": {{ "manifest": "{}" }},
  "output": {{ "dir": "{}" }}
}}"#,
            dir.path().join("data/manifest.json").display(),
            dir.path().join("diag_out").display()
        ),
    );
    let out = run(&["diagnose", "--config", diag.to_str().unwrap(), "--quiet"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let doc: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("diag_out/diagnostics.json")).unwrap(),
    )
    .unwrap();
    let rows = doc["per_trajectory"].as_array().unwrap();
    assert!(!rows.is_empty());
    for row in rows {
        assert!(row["gamma"].as_f64().unwrap() > 0.95);
        assert_eq!(row["warning"].as_bool(), Some(true));
    }
}

#[test]
fn partial_mode_reuses_shapes_from_a_full_report() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate_config(dir.path(), 13);
    assert!(run(&["simulate", "--config", sim.to_str().unwrap(), "--quiet"])
        .status
        .success());
    let full = estimate_config(dir.path(), "full", "");
    assert!(run(&["estimate", "--config", full.to_str().unwrap(), "--quiet"])
        .status
        .success());
    // Feed the full run's shapes back through the partial path.
    let system = dir.path().join("system.json");
    let partial = dir.path().join("estimate_partial.json");
    write(
        &partial,
        &format!(
            r#"{{
  "system": "{}",
  "dataset": {{ "manifest": "{}" }},
  "symmetry": {{ "r_threshold": 0.001, "candidate_stride": 7 }},
  "prony": {{ "window": 320 }},
  "estimator": {{ "mode": "partial", "target_pairs": 4,
                  "shapes_from_report": "{}" }},
  "output": {{ "dir": "{}" }}
}}"#,
            system.display(),
            dir.path().join("data/manifest.json").display(),
            dir.path().join("run/report.json").display(),
            dir.path().join("run_partial").display()
        ),
    );
    let out = run(&["estimate", "--config", partial.to_str().unwrap(), "--quiet"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    // Same normalized factors as the full run.
    let full_doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("run/report.json")).unwrap())
            .unwrap();
    let part_doc: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("run_partial/report.json")).unwrap(),
    )
    .unwrap();
    let full_modes = full_doc["report"]["modes"].as_array().unwrap();
    let part_modes = part_doc["report"]["modes"].as_array().unwrap();
    assert_eq!(full_modes.len(), part_modes.len());
    for (fm, pm) in full_modes.iter().zip(part_modes) {
        let fa = fm["normalized"].as_array().unwrap();
        let pa = pm["normalized"].as_array().unwrap();
        for (x, y) in fa.iter().zip(pa) {
            let dx = (x.as_f64().unwrap() - y.as_f64().unwrap()).abs();
            assert!(dx <= 1e-9, "normalized differ by {dx}");
        }
    }
}
