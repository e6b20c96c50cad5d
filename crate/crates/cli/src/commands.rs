//! The four batch commands and their output files.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use num_complex::Complex64;
use serde::Serialize;

use mpf_core::diagnostics::{condition_bound, error_e1, error_e2, ConditioningThresholds, E2Entry, ErrorReport};
use mpf_core::estimator::{
    estimate_mpf_blackbox, estimate_mpf_full, estimate_mpf_partial, estimate_mpf_subspace,
    PFReport,
};
use mpf_core::linmodel::{modal_decompose, normalize_pf_column, participation_matrix, LinearSystem};
use mpf_core::simgen::{add_noise, generate_scenarios, read_manifest, write_manifest, MeasurementSet};
use mpf_core::transform::{build_transformation, VertexSet};
use mpf_core::Error as CoreError;

use crate::config::{EstimatorMode, ResolvedConfig};

/// Failure category deciding the process exit code.
#[derive(Debug)]
pub enum CmdError {
    /// Bad configuration or missing input: exit 2.
    Config(String),
    /// Numerical failure while producing data: exit 3.
    Numerical(String),
    /// The estimation diagnosed the dataset as unusable: exit 4.
    Estimation(String),
}

impl CmdError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CmdError::Config(_) => 2,
            CmdError::Numerical(_) => 3,
            CmdError::Estimation(_) => 4,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CmdError::Config(m) | CmdError::Numerical(m) | CmdError::Estimation(m) => m,
        }
    }
}

fn classify(err: CoreError) -> CmdError {
    match &err {
        CoreError::InsufficientPairs { .. }
        | CoreError::DegenerateGeometry { .. }
        | CoreError::SingularEdgeMatrix
        | CoreError::IllConditioned { .. }
        | CoreError::PartialObservability { .. }
        | CoreError::NoTrackedMode { .. }
        | CoreError::NoMatch { .. }
        | CoreError::DisconnectedGroups { .. }
        | CoreError::NoFeasiblePeer { .. }
        | CoreError::BelowThreshold { .. } => CmdError::Estimation(err.to_string()),
        CoreError::Parse { .. }
        | CoreError::Io { .. }
        | CoreError::DimensionMismatch { .. }
        | CoreError::EmptyInput => CmdError::Config(err.to_string()),
        _ => CmdError::Numerical(err.to_string()),
    }
}

/// Write through a temp file in the same directory, then rename, so a
/// failing run never leaves a partial file.
fn write_atomic(path: &Path, contents: &str) -> Result<(), CmdError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| CmdError::Config(format!("cannot create {}: {e}", parent.display())))?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| CmdError::Config(format!("bad output path {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    std::fs::write(&tmp, contents)
        .map_err(|e| CmdError::Config(format!("cannot write {}: {e}", tmp.display())))?;
    std::fs::rename(&tmp, path)
        .map_err(|e| CmdError::Config(format!("cannot finalize {}: {e}", path.display())))?;
    Ok(())
}

fn load_system(resolved: &ResolvedConfig) -> Result<LinearSystem, CmdError> {
    let path = resolved
        .system
        .as_ref()
        .ok_or_else(|| CmdError::Config("config block \"system\" is required".into()))?;
    LinearSystem::from_json_file(path).map_err(classify)
}

fn load_dataset(resolved: &ResolvedConfig) -> Result<MeasurementSet, CmdError> {
    let manifest = resolved.dataset_manifest.as_ref().ok_or_else(|| {
        CmdError::Config("config block \"dataset.manifest\" is required".into())
    })?;
    if !manifest.exists() {
        return Err(CmdError::Config(format!(
            "dataset manifest {} does not exist",
            manifest.display()
        )));
    }
    read_manifest(manifest).map_err(classify)
}

fn write_resolved_config(resolved: &ResolvedConfig) -> Result<(), CmdError> {
    write_atomic(
        &resolved.output_dir.join("config_resolved.json"),
        &resolved.to_json(),
    )
}

// ── simulate ────────────────────────────────────────────────────────────────

pub fn cmd_simulate(resolved: &ResolvedConfig, quiet: bool) -> Result<(), CmdError> {
    let sys = load_system(resolved)?;
    let gen = resolved.dataset_generate.as_ref().ok_or_else(|| {
        CmdError::Config("simulate needs the \"dataset.generate\" block".into())
    })?;
    let ms = generate_scenarios(
        &sys,
        &gen.sampler,
        gen.count,
        gen.duration,
        gen.dt,
        gen.seed,
    )
    .map_err(classify)?;
    let ms = if gen.noise_sigma > 0.0 {
        let noisy: Vec<_> = ms
            .trajectories()
            .iter()
            .enumerate()
            .map(|(i, t)| add_noise(t, gen.noise_sigma, gen.seed.wrapping_add(1 + i as u64)))
            .collect();
        MeasurementSet::new(noisy, ms.labels().to_vec()).map_err(classify)?
    } else {
        ms
    };
    std::fs::create_dir_all(&resolved.output_dir).map_err(|e| {
        CmdError::Config(format!(
            "cannot create {}: {e}",
            resolved.output_dir.display()
        ))
    })?;
    let manifest = write_manifest(&ms, &resolved.output_dir).map_err(classify)?;
    write_resolved_config(resolved)?;
    if !quiet {
        println!(
            "wrote {} trajectories ({} states, dt = {}) to {}",
            ms.trajectories().len(),
            ms.dim(),
            ms.dt(),
            manifest.display()
        );
    }
    Ok(())
}

// ── estimate ────────────────────────────────────────────────────────────────

#[derive(Serialize)]
struct ReportEnvelope<'a> {
    config_hash: String,
    report: &'a PFReport,
}

fn print_report(report: &PFReport) {
    for mode in &report.modes {
        println!(
            "mode {:.4} Hz (lambda = {:+.5}{:+.5}i)",
            mode.frequency_hz, mode.lambda.0, mode.lambda.1
        );
        let mut rows: Vec<(usize, f64)> = mode
            .normalized
            .iter()
            .enumerate()
            .filter_map(|(k, v)| v.map(|x| (k, x)))
            .collect();
        rows.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
        for (k, v) in rows {
            println!("  {:<12} {:.4}", report.labels[k], v);
        }
        if !mode.flags.is_empty() {
            println!("  flags: {}", mode.flags.join(", "));
        }
    }
    if !report.flags.is_empty() {
        println!("run flags: {}", report.flags.join(", "));
    }
}

/// Rebuild a transformation from the record stored in a prior report.
fn transformation_from_report(report: &PFReport) -> Result<mpf_core::transform::Transformation, CmdError> {
    let rec = report.provenance.transformation.as_ref().ok_or_else(|| {
        CmdError::Config("prior report carries no transformation record".into())
    })?;
    let n = rec.h_inv.len();
    let e = Array2::from_shape_fn((n, n), |(i, j)| rec.h_inv[i][j]);
    let vs = VertexSet::from_vertices(
        ndarray::Array1::zeros(n),
        (0..n).map(|j| e.column(j).to_owned()).collect(),
    )
    .map_err(classify)?;
    build_transformation(&vs).map_err(classify)
}

pub fn cmd_estimate(resolved: &ResolvedConfig, quiet: bool) -> Result<PathBuf, CmdError> {
    let ms = load_dataset(resolved)?;
    let cfg = resolved.estimator_config();
    let report = match resolved.estimator_mode {
        EstimatorMode::Full => estimate_mpf_full(&ms, &cfg).map_err(classify)?,
        EstimatorMode::Blackbox => estimate_mpf_blackbox(&ms, &cfg).map_err(classify)?,
        EstimatorMode::Subspace => {
            let groups = resolved.groups.clone().ok_or_else(|| {
                CmdError::Config("subspace mode needs \"estimator.groups\"".into())
            })?;
            estimate_mpf_subspace(&ms, &groups, &cfg).map_err(classify)?
        }
        EstimatorMode::Partial => {
            let prior_path = resolved.shapes_from_report.as_ref().ok_or_else(|| {
                CmdError::Config(
                    "partial mode needs \"estimator.shapes_from_report\" pointing at a prior full report".into(),
                )
            })?;
            let text = std::fs::read_to_string(prior_path).map_err(|e| {
                CmdError::Config(format!("cannot read {}: {e}", prior_path.display()))
            })?;
            let prior: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| CmdError::Config(format!("{}: {e}", prior_path.display())))?;
            let prior_report: PFReport =
                serde_json::from_value(prior.get("report").cloned().unwrap_or(prior))
                    .map_err(|e| CmdError::Config(format!("{}: {e}", prior_path.display())))?;
            let t = transformation_from_report(&prior_report)?;
            let shapes = &prior_report.provenance.z_shapes;
            if shapes.is_empty() {
                return Err(CmdError::Config(
                    "prior report carries no z-space shapes".into(),
                ));
            }
            // Subset the recorded shapes by the tracked frequencies.
            let selected: Vec<usize> = match &resolved.tracked_hz {
                None => (0..shapes.len()).collect(),
                Some(targets) => {
                    let mut picked = Vec::new();
                    for (hz, tol) in targets {
                        let best = shapes
                            .iter()
                            .enumerate()
                            .map(|(i, s)| (i, (s.lambda.1.abs() / std::f64::consts::TAU - hz).abs()))
                            .filter(|(_, d)| d <= tol)
                            .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
                        match best {
                            Some((i, _)) => {
                                if !picked.contains(&i) {
                                    picked.push(i)
                                }
                            }
                            None => {
                                return Err(CmdError::Estimation(format!(
                                    "no recorded shape within {tol} Hz of {hz} Hz"
                                )))
                            }
                        }
                    }
                    picked
                }
            };
            let lambdas: Vec<Complex64> = selected
                .iter()
                .map(|&i| Complex64::new(shapes[i].lambda.0, shapes[i].lambda.1))
                .collect();
            let shape_matrix = Array2::from_shape_fn((ms.dim(), selected.len()), |(k, c)| {
                let (re, im) = shapes[selected[c]].shape[k];
                Complex64::new(re, im)
            });
            let mut partial_cfg = cfg.clone();
            partial_cfg.tracked = mpf_core::estimator::TrackedModes::All;
            estimate_mpf_partial(&ms, &lambdas, &shape_matrix, &t, &partial_cfg)
                .map_err(classify)?
        }
    };

    let envelope = ReportEnvelope {
        config_hash: resolved.hash(),
        report: &report,
    };
    let report_path = resolved.output_dir.join("report.json");
    write_atomic(
        &report_path,
        &serde_json::to_string_pretty(&envelope).expect("report serializes"),
    )?;
    if resolved.formats.iter().any(|f| f == "csv") {
        write_atomic(&resolved.output_dir.join("report.csv"), &report.to_csv())?;
    }
    write_resolved_config(resolved)?;
    if !quiet {
        print_report(&report);
    }
    Ok(report_path)
}

// ── compare ─────────────────────────────────────────────────────────────────

#[derive(Serialize)]
struct ComparisonDoc {
    config_hash: String,
    matched_modes: Vec<MatchedMode>,
    unmatched_report_modes_hz: Vec<f64>,
    errors: ErrorReport,
}

#[derive(Serialize)]
struct MatchedMode {
    report_hz: f64,
    model_hz: f64,
    model_index: usize,
    max_abs_e2_percent: f64,
}

pub fn cmd_compare(resolved: &ResolvedConfig, quiet: bool) -> Result<PathBuf, CmdError> {
    let sys = load_system(resolved)?;
    let report_path = resolved
        .compare_report
        .clone()
        .ok_or_else(|| CmdError::Config("compare needs the \"compare.report\" block".into()))?;
    if !report_path.exists() {
        return Err(CmdError::Config(format!(
            "report {} does not exist",
            report_path.display()
        )));
    }
    let text = std::fs::read_to_string(&report_path)
        .map_err(|e| CmdError::Config(format!("cannot read {}: {e}", report_path.display())))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| CmdError::Config(format!("{}: {e}", report_path.display())))?;
    let report: PFReport = serde_json::from_value(value.get("report").cloned().unwrap_or(value))
        .map_err(|e| CmdError::Config(format!("{}: {e}", report_path.display())))?;

    let dec = modal_decompose(&sys).map_err(classify)?;
    let pf = participation_matrix(&dec);
    let initial_states: Vec<ndarray::Array1<f64>> = report
        .provenance
        .segments
        .iter()
        .map(|s| ndarray::Array1::from_vec(s.x0.clone()))
        .collect();

    let mut errors = ErrorReport::default();
    let mut matched = Vec::new();
    let mut unmatched = Vec::new();
    for mode in &report.modes {
        // Match the report mode to a model mode by eigenvalue distance,
        // accepting within a relative frequency tolerance.
        let lambda = mode.lambda_c();
        let best = dec
            .eigenvalues()
            .iter()
            .enumerate()
            .map(|(i, l)| (i, (l - lambda).norm()))
            .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal));
        let Some((model_idx, dist)) = best else {
            unmatched.push(mode.frequency_hz);
            continue;
        };
        if dist > 0.1 * dec.eigenvalues()[model_idx].norm() + 0.05 {
            unmatched.push(mode.frequency_hz);
            continue;
        }
        let model_col = normalize_pf_column(&pf, model_idx).map_err(classify)?;

        // e1 over the provenance initial-state set.
        if !initial_states.is_empty() {
            for k in 0..report.labels.len() {
                if let Ok(e1) = error_e1(&dec, &initial_states, k, model_idx) {
                    errors.e1.push((k, model_idx, (e1.re, e1.im)));
                }
            }
        }

        // e2 over all state pairs with usable magnitudes.
        let mut mode_max = 0.0f64;
        for i in 0..report.labels.len() {
            for j in (i + 1)..report.labels.len() {
                let (Some(mi), Some(mj)) = (mode.normalized[i], mode.normalized[j]) else {
                    continue;
                };
                match error_e2(model_col[i], model_col[j], mi, mj, i, j) {
                    Ok(e2) => {
                        mode_max = mode_max.max(e2.abs());
                        errors.e2.push(E2Entry {
                            state_i: i,
                            state_j: j,
                            mode_hz: mode.frequency_hz,
                            percent: e2,
                        });
                    }
                    Err(_) => continue,
                }
            }
        }
        matched.push(MatchedMode {
            report_hz: mode.frequency_hz,
            model_hz: dec.frequencies_hz()[model_idx],
            model_index: model_idx,
            max_abs_e2_percent: mode_max,
        });
    }
    errors.max_abs_e2_percent = errors
        .e2
        .iter()
        .map(|e| e.percent.abs())
        .fold(0.0, f64::max);

    let doc = ComparisonDoc {
        config_hash: resolved.hash(),
        matched_modes: matched,
        unmatched_report_modes_hz: unmatched.clone(),
        errors,
    };
    let out = resolved.output_dir.join("comparison.json");
    write_atomic(&out, &serde_json::to_string_pretty(&doc).expect("serializes"))?;
    write_resolved_config(resolved)?;
    if !quiet {
        for m in &doc.matched_modes {
            println!(
                "mode {:.4} Hz vs model {:.4} Hz: max |e2| = {:.4}%",
                m.report_hz, m.model_hz, m.max_abs_e2_percent
            );
        }
        for hz in &unmatched {
            println!("warning: report mode {hz:.4} Hz matches no model mode");
        }
        println!("overall max |e2| = {:.4}%", doc.errors.max_abs_e2_percent);
    }
    Ok(out)
}

// ── diagnose ────────────────────────────────────────────────────────────────

#[derive(Serialize)]
struct DiagnosisDoc {
    config_hash: String,
    per_trajectory: Vec<TrajectoryDiagnosis>,
    worst_gamma_scenario: Option<String>,
}

#[derive(Serialize)]
struct TrajectoryDiagnosis {
    scenario_id: String,
    gamma: f64,
    pair: (usize, usize),
    condition_lower_bound: f64,
    condition_estimate: f64,
    warning: bool,
}

pub fn cmd_diagnose(resolved: &ResolvedConfig, quiet: bool) -> Result<PathBuf, CmdError> {
    let ms = load_dataset(resolved)?;
    let thresholds = ConditioningThresholds::default();
    let mut rows = Vec::new();
    let mut worst: Option<(f64, String)> = None;
    for traj in ms.trajectories() {
        let r = condition_bound(traj.states().view(), &thresholds).map_err(classify)?;
        if worst.as_ref().map_or(true, |(g, _)| r.gamma > *g) {
            worst = Some((r.gamma, traj.scenario_id().to_string()));
        }
        rows.push(TrajectoryDiagnosis {
            scenario_id: traj.scenario_id().to_string(),
            gamma: r.gamma,
            pair: r.pair,
            condition_lower_bound: r.condition_lower_bound.unwrap_or(f64::NAN),
            condition_estimate: r.condition_estimate.unwrap_or(f64::NAN),
            warning: r.warning,
        });
    }
    let doc = DiagnosisDoc {
        config_hash: resolved.hash(),
        per_trajectory: rows,
        worst_gamma_scenario: worst.as_ref().map(|(_, id)| id.clone()),
    };
    let out = resolved.output_dir.join("diagnostics.json");
    write_atomic(&out, &serde_json::to_string_pretty(&doc).expect("serializes"))?;
    write_resolved_config(resolved)?;
    if !quiet {
        for row in &doc.per_trajectory {
            println!(
                "{}: gamma = {:.4} (columns {}, {}), cond >= {:.3}, cond = {:.3}{}",
                row.scenario_id,
                row.gamma,
                row.pair.0,
                row.pair.1,
                row.condition_lower_bound,
                row.condition_estimate,
                if row.warning { "  [WARNING]" } else { "" }
            );
        }
        if let Some((gamma, id)) = &worst {
            println!("worst coherence: {id} with gamma = {gamma:.4}");
        }
    }
    Ok(out)
}
