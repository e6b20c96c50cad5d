//! Measurement-based participation factors.
//!
//! The estimator averages per-segment modal amplitudes into extended
//! participation factors,
//!
//! ```text
//! EPF_ki = avg over segments l of B_ki^(l) / x_k0^(l)
//! ```
//!
//! which equal the model participation factors whenever the segment
//! initial states satisfy the symmetric condition (closure of the set
//! under flipping the sign of any single coordinate). Measured data rarely
//! satisfies it, so the full pipeline first selects near-mirrored pairs,
//! maps them by `H` into a space where the selected set is symmetric,
//! computes the EPFs there, and maps the factors back:
//!
//! ```text
//! p_x[i][j] = (sum_k Hinv[i][k] phi_z[k][j])
//!           * (sum_k H[k][i] p_z[k][j] / phi_z[k][j])
//! ```
//!
//! Mode shapes `phi_z` come from the measured amplitudes themselves (the
//! amplitude vector of a mode is proportional to its shape), or from the
//! caller in the partial-observability path.

use ndarray::{s, Array1, Array2, ArrayView1};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{condition_bound, ConditioningReport, ConditioningThresholds, ErrorReport};
use crate::error::{Error, Result};
use crate::linmodel::ModalDecomposition;
use crate::prony::{fit_prony, match_modes_lenient, select_order, PronyFit};
use crate::simgen::MeasurementSet;
use crate::symmetry::{select_pair_set, SampleId, SymmetricPairSet, SymmetryConfig};
use crate::transform::{apply_transformation, assemble_vertex_set, build_transformation, Transformation};

/// Which modes a run reports.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrackedModes {
    /// Every identified mode, one entry per oscillatory pair plus each
    /// real mode.
    #[default]
    All,
    /// Only modes whose frequency falls within `tol_hz` of a requested
    /// frequency.
    ByFrequency { targets: Vec<FrequencyTarget> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrequencyTarget {
    pub hz: f64,
    pub tol_hz: f64,
}

/// Pipeline configuration. `None` fields resolve to the documented
/// defaults at run time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub symmetry: SymmetryConfig,
    /// Symmetric pairs to harvest; default `2^min(N, 4)`.
    pub target_pairs: Option<usize>,
    /// Conditioning bound on the edge matrix.
    pub cond_bound: f64,
    /// Prony model order; `None` selects automatically up to `max_order`.
    pub prony_order: Option<usize>,
    /// Cap for automatic order selection; default = state count.
    pub max_order: Option<usize>,
    /// Segment fit window in samples; default min(400, remaining).
    pub window: Option<usize>,
    pub tracked: TrackedModes,
    /// Initial-state components below `floor * state RMS` are excluded
    /// from the EPF average.
    pub amplitude_floor: f64,
    /// Mode-shape divisor entries below `floor * column norm` are excluded
    /// from the back-transformation sum.
    pub shape_divisor_floor: f64,
    pub conditioning: ConditioningThresholds,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            symmetry: SymmetryConfig::default(),
            target_pairs: None,
            cond_bound: 1e6,
            prony_order: None,
            max_order: None,
            window: None,
            tracked: TrackedModes::All,
            amplitude_floor: 1e-6,
            shape_divisor_floor: 1e-8,
            conditioning: ConditioningThresholds::default(),
        }
    }
}

const DEFAULT_WINDOW: usize = 400;

/// Coordinate space an EPF table lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    X,
    Z,
}

/// One response segment: its initial state and the modal amplitudes of
/// each tracked mode, with an availability mask for modes the segment's
/// fit could not match.
#[derive(Debug, Clone)]
pub struct Segment {
    pub initial_state: Array1<f64>,
    /// `n_states x n_tracked`.
    pub amplitudes: Array2<Complex64>,
    pub available: Vec<bool>,
    pub id: SampleId,
    pub scenario_id: String,
    pub fit_residual_rms: f64,
}

/// Extended participation factors with per-entry sample counts and
/// dispersion; a count of zero marks an absent entry.
#[derive(Debug, Clone)]
pub struct EpfTable {
    pub values: Array2<Complex64>,
    pub counts: Array2<usize>,
    pub dispersion: Array2<f64>,
    pub space: Space,
}

impl EpfTable {
    pub fn entry(&self, state: usize, mode: usize) -> Option<Complex64> {
        (self.counts[(state, mode)] > 0).then(|| self.values[(state, mode)])
    }
}

/// Average the per-segment amplitude ratios into EPFs. `state_rms` sets
/// the per-state exclusion floor (`amplitude_floor * state_rms[k]`).
pub fn compute_epf(
    segments: &[Segment],
    state_rms: ArrayView1<'_, f64>,
    amplitude_floor: f64,
    space: Space,
) -> Result<EpfTable> {
    let Some(first) = segments.first() else {
        return Err(Error::EmptyInput);
    };
    let n = first.initial_state.len();
    let m = first.amplitudes.ncols();
    let mut values = Array2::<Complex64>::zeros((n, m));
    let mut counts = Array2::<usize>::zeros((n, m));
    let mut dispersion = Array2::<f64>::zeros((n, m));
    for k in 0..n {
        let floor = amplitude_floor * state_rms[k];
        for i in 0..m {
            let mut terms: Vec<Complex64> = Vec::new();
            for seg in segments {
                if !seg.available[i] || seg.initial_state[k].abs() < floor {
                    continue;
                }
                terms.push(seg.amplitudes[(k, i)] / seg.initial_state[k]);
            }
            if terms.is_empty() {
                continue;
            }
            let mean = terms.iter().sum::<Complex64>() / terms.len() as f64;
            let var = terms.iter().map(|t| (t - mean).norm_sqr()).sum::<f64>() / terms.len() as f64;
            values[(k, i)] = mean;
            counts[(k, i)] = terms.len();
            dispersion[(k, i)] = var.sqrt();
        }
    }
    Ok(EpfTable {
        values,
        counts,
        dispersion,
        space,
    })
}

/// Exact EPF-minus-PF gap of state `k` in mode `i` for an initial-state
/// set; delegates to the shared error-index implementation.
pub fn epf_equals_pf_residual(
    dec: &ModalDecomposition,
    initial_states: &[Array1<f64>],
    k: usize,
    i: usize,
) -> Result<Complex64> {
    crate::diagnostics::error_e1(dec, initial_states, k, i)
}

// ── Report types ────────────────────────────────────────────────────────────

/// Estimate for one reported mode.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModeEstimate {
    pub lambda: (f64, f64),
    pub frequency_hz: f64,
    /// Raw complex MPF per state; `None` where the estimate has no
    /// coverage.
    pub raw: Vec<Option<(f64, f64)>>,
    /// Magnitudes normalized so the largest covered entry is exactly 1.
    pub normalized: Vec<Option<f64>>,
    /// Segments that contributed per state (weakest z-entry for
    /// transformed runs).
    pub counts: Vec<usize>,
    pub dispersion: Vec<f64>,
    pub flags: Vec<String>,
}

impl ModeEstimate {
    pub fn lambda_c(&self) -> Complex64 {
        Complex64::new(self.lambda.0, self.lambda.1)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairRecord {
    pub a: (usize, usize),
    pub b: (usize, usize),
    pub residual: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub scenario_id: String,
    pub scenario: usize,
    pub sample: usize,
    /// Initial state in original (x-space) coordinates.
    pub x0: Vec<f64>,
    pub fit_residual_rms: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransformationRecord {
    pub h: Vec<Vec<f64>>,
    pub h_inv: Vec<Vec<f64>>,
    pub condition_number: f64,
    pub quality: f64,
}

impl TransformationRecord {
    fn from_transformation(t: &Transformation) -> Self {
        let rows = |m: &Array2<f64>| -> Vec<Vec<f64>> {
            m.rows().into_iter().map(|r| r.to_vec()).collect()
        };
        Self {
            h: rows(t.h()),
            h_inv: rows(t.h_inv()),
            condition_number: t.condition_number(),
            quality: t.quality(),
        }
    }
}

/// Estimated z-space mode shapes kept for audit and for feeding the
/// partial-observability path.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShapeRecord {
    pub lambda: (f64, f64),
    pub shape: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub estimator_mode: String,
    pub prony_order: usize,
    pub pairs: Vec<PairRecord>,
    pub segments: Vec<SegmentRecord>,
    pub transformation: Option<TransformationRecord>,
    pub z_shapes: Vec<ShapeRecord>,
    pub subspace_groups: Vec<Vec<usize>>,
}

/// Full estimation result: per-mode factors, provenance and diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PFReport {
    pub labels: Vec<String>,
    pub modes: Vec<ModeEstimate>,
    pub provenance: Provenance,
    pub conditioning: Option<ConditioningReport>,
    pub errors: Option<ErrorReport>,
    pub flags: Vec<String>,
}

impl PFReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            path: "<report json>".into(),
            detail: e.to_string(),
        })
    }

    /// Flat CSV rows: state, mode_hz, mpf_normalized, mpf_raw_re,
    /// mpf_raw_im, L, dispersion, flags.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("state,mode_hz,mpf_normalized,mpf_raw_re,mpf_raw_im,L,dispersion,flags\n");
        for mode in &self.modes {
            for (k, label) in self.labels.iter().enumerate() {
                let (norm, re, im) = match (mode.normalized[k], mode.raw[k]) {
                    (Some(nv), Some((re, im))) => (format!("{nv}"), format!("{re}"), format!("{im}")),
                    _ => ("".into(), "".into(), "".into()),
                };
                out.push_str(&format!(
                    "{label},{},{norm},{re},{im},{},{},{}\n",
                    mode.frequency_hz,
                    mode.counts[k],
                    mode.dispersion[k],
                    mode.flags.join(";")
                ));
            }
        }
        out
    }

    /// Mode estimate closest to the requested frequency within `tol_hz`.
    pub fn mode_by_frequency(&self, hz: f64, tol_hz: f64) -> Option<&ModeEstimate> {
        self.modes
            .iter()
            .filter(|m| (m.frequency_hz - hz).abs() <= tol_hz)
            .min_by(|a, b| {
                (a.frequency_hz - hz)
                    .abs()
                    .partial_cmp(&(b.frequency_hz - hz).abs())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
    }
}

// ── Pipeline internals ──────────────────────────────────────────────────────

struct FittedSegments {
    segments: Vec<Segment>,
    reference: Vec<Complex64>,
    order: usize,
    low_confidence: bool,
}

/// Slice one segment window out of a trajectory set.
fn segment_slice<'a>(
    ms: &'a MeasurementSet,
    id: SampleId,
    window: usize,
) -> Option<ndarray::ArrayView2<'a, f64>> {
    let traj = &ms.trajectories()[id.scenario];
    let remaining = traj.len().saturating_sub(id.sample);
    if remaining < 3 {
        return None;
    }
    let end = id.sample + remaining.min(window);
    Some(traj.states().slice(s![id.sample..end, ..]))
}

/// Fit every pair endpoint as a segment against a common reference mode
/// set. Operates on whichever space `ms` is expressed in.
fn fit_segments(
    ms: &MeasurementSet,
    pairs: &SymmetricPairSet,
    cfg: &EstimatorConfig,
    reference_override: Option<&[Complex64]>,
) -> Result<FittedSegments> {
    let n = ms.dim();
    let window = cfg.window.unwrap_or(DEFAULT_WINDOW).max(3);
    let ids: Vec<SampleId> = pairs
        .pairs
        .iter()
        .flat_map(|p| [p.a_id, p.b_id])
        .collect();

    // Model order: configured, or automatic on the first usable segment.
    let mut order = cfg.prony_order.unwrap_or(0);
    let mut low_confidence = false;
    if order == 0 {
        let max_order = cfg.max_order.unwrap_or(n).max(1);
        let probe = ids
            .iter()
            .find_map(|&id| segment_slice(ms, id, window))
            .ok_or(Error::InsufficientPairs {
                found: 0,
                needed: n + 1,
            })?;
        let sel = select_order(probe, ms.dt(), max_order)?;
        order = sel.order;
        low_confidence = sel.low_confidence();
    }

    let mut fits: Vec<(SampleId, PronyFit, Array1<f64>)> = Vec::new();
    for &id in &ids {
        let Some(slice) = segment_slice(ms, id, window) else {
            continue;
        };
        if slice.nrows() < 2 * order + 1 {
            continue;
        }
        let fit = fit_prony(slice, ms.dt(), order)?;
        let z0 = slice.row(0).to_owned();
        fits.push((id, fit, z0));
    }
    if fits.len() < n + 1 {
        return Err(Error::InsufficientPairs {
            found: fits.len() / 2,
            needed: n + 1,
        });
    }

    // Reference modes: provided, or taken from the lowest-residual fit.
    let reference: Vec<Complex64> = match reference_override {
        Some(r) => r.to_vec(),
        None => {
            let best = fits
                .iter()
                .enumerate()
                .min_by(|(ia, a), (ib, b)| {
                    a.1.residual_rms
                        .partial_cmp(&b.1.residual_rms)
                        .unwrap_or(std::cmp::Ordering::Equal)
                        .then(ia.cmp(ib))
                })
                .expect("at least one fit");
            best.1 .1.eigenvalues()
        }
    };

    let mut segments = Vec::with_capacity(fits.len());
    for (id, fit, z0) in fits {
        let lambdas = fit.eigenvalues();
        let map = match_modes_lenient(&lambdas, &reference);
        let mut amplitudes = Array2::<Complex64>::zeros((n, reference.len()));
        let mut available = vec![false; reference.len()];
        for (fit_idx, ref_idx) in map.iter().enumerate() {
            if let Some(r) = ref_idx {
                available[*r] = true;
                for k in 0..n {
                    amplitudes[(k, *r)] = fit.modes[fit_idx].amplitudes[k];
                }
            }
        }
        segments.push(Segment {
            initial_state: z0,
            amplitudes,
            available,
            id,
            scenario_id: ms.trajectories()[id.scenario].scenario_id().to_string(),
            fit_residual_rms: fit.residual_rms,
        });
    }
    Ok(FittedSegments {
        segments,
        reference,
        order,
        low_confidence,
    })
}

/// Estimate each mode's z-space shape from the segment with the largest
/// amplitude vector for that mode.
fn estimate_shapes(segments: &[Segment], n_modes: usize, n: usize) -> Vec<Option<Array1<Complex64>>> {
    (0..n_modes)
        .map(|i| {
            let mut best: Option<(f64, &Segment)> = None;
            for seg in segments {
                if !seg.available[i] {
                    continue;
                }
                let norm: f64 = (0..n).map(|k| seg.amplitudes[(k, i)].norm_sqr()).sum();
                if best.as_ref().map_or(true, |(b, _)| norm > *b) {
                    best = Some((norm, seg));
                }
            }
            best.and_then(|(norm, seg)| {
                (norm > 0.0).then(|| {
                    Array1::from_shape_fn(n, |k| seg.amplitudes[(k, i)])
                })
            })
        })
        .collect()
}

/// Back-transformation of participation factors from z-space to x-space
/// for one mode (summation form of the shape/composition split).
///
/// Returns the x-space column plus the z-indices excluded by the shape
/// divisor floor.
fn pf_column_to_x(
    pf_z: &EpfTable,
    mode: usize,
    shape_z: &Array1<Complex64>,
    t: &Transformation,
    divisor_floor: f64,
) -> (Vec<Option<Complex64>>, Vec<usize>) {
    let n = shape_z.len();
    let col_norm = shape_z.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    let floor = divisor_floor * col_norm;
    let h = t.h();
    let hinv = t.h_inv();
    let mut excluded = Vec::new();
    // Composition sum: sum_k H[k][i] p_z[k][mode] / phi_z[k].
    let mut comp = vec![Complex64::new(0.0, 0.0); n];
    for k in 0..n {
        if shape_z[k].norm() < floor || pf_z.counts[(k, mode)] == 0 {
            excluded.push(k);
            continue;
        }
        let ratio = pf_z.values[(k, mode)] / shape_z[k];
        for i in 0..n {
            comp[i] += h[(k, i)] * ratio;
        }
    }
    // Shape sum: sum_k Hinv[i][k] phi_z[k].
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut shape = Complex64::new(0.0, 0.0);
        for k in 0..n {
            shape += hinv[(i, k)] * shape_z[k];
        }
        out.push(Some(shape * comp[i]));
    }
    (out, excluded)
}

/// Select which reference modes are reported, honoring the tracked-mode
/// configuration. Oscillatory pairs collapse onto their positive-frequency
/// representative.
fn reported_modes(reference: &[Complex64], tracked: &TrackedModes) -> Result<Vec<usize>> {
    let representatives: Vec<usize> = (0..reference.len())
        .filter(|&i| reference[i].im >= 0.0)
        .collect();
    match tracked {
        TrackedModes::All => Ok(representatives),
        TrackedModes::ByFrequency { targets } => {
            let mut picked = Vec::new();
            for target in targets {
                let best = representatives
                    .iter()
                    .map(|&i| (i, (reference[i].im.abs() / std::f64::consts::TAU - target.hz).abs()))
                    .filter(|(_, d)| *d <= target.tol_hz)
                    .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal));
                match best {
                    Some((i, _)) => {
                        if !picked.contains(&i) {
                            picked.push(i);
                        }
                    }
                    None => {
                        return Err(Error::NoTrackedMode {
                            hz: target.hz,
                            tol: target.tol_hz,
                        })
                    }
                }
            }
            Ok(picked)
        }
    }
}

fn normalize_column(raw: &[Option<Complex64>]) -> Vec<Option<f64>> {
    let max = raw
        .iter()
        .flatten()
        .map(|v| v.norm())
        .fold(0.0f64, f64::max);
    raw.iter()
        .map(|v| v.map(|z| if max > 0.0 { z.norm() / max } else { 0.0 }))
        .collect()
}

fn worst_conditioning(
    ms: &MeasurementSet,
    thresholds: &ConditioningThresholds,
) -> Option<ConditioningReport> {
    let mut worst: Option<ConditioningReport> = None;
    for traj in ms.trajectories() {
        let Ok(report) = condition_bound(traj.states().view(), thresholds) else {
            continue;
        };
        if worst.as_ref().map_or(true, |w| report.gamma > w.gamma) {
            worst = Some(report);
        }
    }
    worst
}

fn build_mode_estimates(
    pf_x: &[(Complex64, Vec<Option<Complex64>>, Vec<usize>, Vec<usize>, Vec<f64>)],
) -> Vec<ModeEstimate> {
    pf_x.iter()
        .map(|(lambda, raw, excluded, counts, dispersion)| {
            let mut flags = Vec::new();
            if !excluded.is_empty() {
                flags.push(format!(
                    "shape-divisor-excluded:{}",
                    excluded
                        .iter()
                        .map(|k| k.to_string())
                        .collect::<Vec<_>>()
                        .join("+")
                ));
            }
            ModeEstimate {
                lambda: (lambda.re, lambda.im),
                frequency_hz: lambda.im.abs() / std::f64::consts::TAU,
                raw: raw.iter().map(|v| v.map(|z| (z.re, z.im))).collect(),
                normalized: normalize_column(raw),
                counts: counts.clone(),
                dispersion: dispersion.clone(),
                flags,
            }
        })
        .collect()
}

// ── Public estimation entry points ──────────────────────────────────────────

/// Full-observability pipeline: pair selection, transformation, z-space
/// EPFs for every system mode, back-transformation.
pub fn estimate_mpf_full(ms: &MeasurementSet, cfg: &EstimatorConfig) -> Result<PFReport> {
    let n = ms.dim();
    let target_pairs = cfg.target_pairs.unwrap_or(1usize << n.min(4));
    let pairs = select_pair_set(ms, &cfg.symmetry, target_pairs)?;
    let vs = assemble_vertex_set(&pairs, cfg.cond_bound)?;
    let t = build_transformation(&vs)?;
    let z_ms = apply_transformation(&t, ms)?;
    estimate_with_transformation(ms, &z_ms, &t, &pairs, cfg, None, "full")
}

/// Shared tail of the full and partial paths. When `known_shapes` is
/// given, only those modes are estimated and the reference eigenvalues
/// come with them.
#[allow(clippy::too_many_arguments)]
fn estimate_with_transformation(
    ms: &MeasurementSet,
    z_ms: &MeasurementSet,
    t: &Transformation,
    pairs: &SymmetricPairSet,
    cfg: &EstimatorConfig,
    known_shapes: Option<(&[Complex64], &Array2<Complex64>)>,
    mode_name: &str,
) -> Result<PFReport> {
    let n = ms.dim();
    let reference_override = known_shapes.map(|(lambdas, _)| lambdas);
    let fitted = fit_segments(z_ms, pairs, cfg, reference_override)?;

    if known_shapes.is_none() {
        // Full observability requires every system mode identified.
        if fitted.reference.len() < n {
            return Err(Error::PartialObservability {
                identified: fitted.reference.len(),
                needed: n,
            });
        }
    }

    let epf_z = compute_epf(
        &fitted.segments,
        z_ms.state_rms().view(),
        cfg.amplitude_floor,
        Space::Z,
    )?;

    let shapes: Vec<Option<Array1<Complex64>>> = match known_shapes {
        Some((_, shapes)) => (0..fitted.reference.len())
            .map(|i| Some(shapes.column(i).to_owned()))
            .collect(),
        None => estimate_shapes(&fitted.segments, fitted.reference.len(), n),
    };

    let report_indices = reported_modes(&fitted.reference, &cfg.tracked)?;
    let mut columns = Vec::new();
    let mut dropped = Vec::new();
    for &mode in &report_indices {
        let Some(shape) = &shapes[mode] else {
            dropped.push(mode);
            continue;
        };
        let (raw, excluded) = pf_column_to_x(&epf_z, mode, shape, t, cfg.shape_divisor_floor);
        let counts: Vec<usize> = (0..n)
            .map(|_| {
                (0..n)
                    .map(|k| epf_z.counts[(k, mode)])
                    .filter(|c| *c > 0)
                    .min()
                    .unwrap_or(0)
            })
            .collect();
        let dispersion: Vec<f64> = (0..n)
            .map(|_| {
                (0..n)
                    .map(|k| epf_z.dispersion[(k, mode)])
                    .fold(0.0, f64::max)
            })
            .collect();
        columns.push((fitted.reference[mode], raw, excluded, counts, dispersion));
    }

    let mut flags = Vec::new();
    if fitted.low_confidence {
        flags.push("low-confidence-order".to_string());
    }
    for mode in dropped {
        flags.push(format!("mode-dropped-no-shape:{mode}"));
    }
    let conditioning = worst_conditioning(ms, &cfg.conditioning);
    if conditioning.as_ref().is_some_and(|c| c.warning) {
        flags.push("ill-conditioned-sampling".to_string());
    }

    let z_shapes = fitted
        .reference
        .iter()
        .zip(&shapes)
        .filter_map(|(lambda, shape)| {
            shape.as_ref().map(|s| ShapeRecord {
                lambda: (lambda.re, lambda.im),
                shape: s.iter().map(|z| (z.re, z.im)).collect(),
            })
        })
        .collect();

    Ok(PFReport {
        labels: ms.labels().to_vec(),
        modes: build_mode_estimates(&columns),
        provenance: Provenance {
            estimator_mode: mode_name.to_string(),
            prony_order: fitted.order,
            pairs: pairs
                .pairs
                .iter()
                .map(|p| PairRecord {
                    a: (p.a_id.scenario, p.a_id.sample),
                    b: (p.b_id.scenario, p.b_id.sample),
                    residual: p.residual,
                })
                .collect(),
            segments: fitted
                .segments
                .iter()
                .map(|seg| {
                    let x0 = t.to_x(seg.initial_state.view());
                    SegmentRecord {
                        scenario_id: seg.scenario_id.clone(),
                        scenario: seg.id.scenario,
                        sample: seg.id.sample,
                        x0: x0.to_vec(),
                        fit_residual_rms: seg.fit_residual_rms,
                    }
                })
                .collect(),
            transformation: Some(TransformationRecord::from_transformation(t)),
            z_shapes,
            subspace_groups: Vec::new(),
        },
        conditioning,
        errors: None,
        flags,
    })
}

/// Partial-observability path: the transformation and the z-space shapes
/// of the tracked modes are supplied; only those modes are estimated.
pub fn estimate_mpf_partial(
    ms: &MeasurementSet,
    shape_lambdas: &[Complex64],
    shapes_z: &Array2<Complex64>,
    t: &Transformation,
    cfg: &EstimatorConfig,
) -> Result<PFReport> {
    if shapes_z.nrows() != ms.dim() || shapes_z.ncols() != shape_lambdas.len() {
        return Err(Error::DimensionMismatch {
            expected: ms.dim() * shape_lambdas.len(),
            got: shapes_z.len(),
            context: "z-space shape matrix".into(),
        });
    }
    let n = ms.dim();
    let target_pairs = cfg.target_pairs.unwrap_or(1usize << n.min(4));
    let pairs = select_pair_set(ms, &cfg.symmetry, target_pairs)?;
    let z_ms = apply_transformation(t, ms)?;
    estimate_with_transformation(
        ms,
        &z_ms,
        t,
        &pairs,
        cfg,
        Some((shape_lambdas, shapes_z)),
        "partial",
    )
}

/// Black-box shortcut: with designed symmetric disturbances the selection
/// and transformation steps collapse, and the EPFs are computed directly
/// in x-space over every trajectory start.
pub fn estimate_mpf_blackbox(ms: &MeasurementSet, cfg: &EstimatorConfig) -> Result<PFReport> {
    let n = ms.dim();
    let window = cfg.window.unwrap_or(DEFAULT_WINDOW).max(3);
    let t = Transformation::identity(n);

    let mut order = cfg.prony_order.unwrap_or(0);
    let mut low_confidence = false;
    if order == 0 {
        let probe = segment_slice(ms, SampleId { scenario: 0, sample: 0 }, window)
            .ok_or(Error::EmptyInput)?;
        let sel = select_order(probe, ms.dt(), cfg.max_order.unwrap_or(n).max(1))?;
        order = sel.order;
        low_confidence = sel.low_confidence();
    }

    let mut fits = Vec::new();
    for (scenario, traj) in ms.trajectories().iter().enumerate() {
        let id = SampleId { scenario, sample: 0 };
        let Some(slice) = segment_slice(ms, id, window) else {
            continue;
        };
        if slice.nrows() < 2 * order + 1 {
            continue;
        }
        let fit = fit_prony(slice, ms.dt(), order)?;
        fits.push((id, fit, traj.initial_state().to_owned(), traj.scenario_id().to_string()));
    }
    if fits.is_empty() {
        return Err(Error::EmptyInput);
    }
    let reference = fits
        .iter()
        .enumerate()
        .min_by(|(ia, a), (ib, b)| {
            a.1.residual_rms
                .partial_cmp(&b.1.residual_rms)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(ia.cmp(ib))
        })
        .map(|(_, f)| f.1.eigenvalues())
        .expect("nonempty fits");

    let mut segments = Vec::new();
    for (id, fit, x0, scenario_id) in fits {
        let lambdas = fit.eigenvalues();
        let map = match_modes_lenient(&lambdas, &reference);
        let mut amplitudes = Array2::<Complex64>::zeros((n, reference.len()));
        let mut available = vec![false; reference.len()];
        for (fit_idx, ref_idx) in map.iter().enumerate() {
            if let Some(r) = ref_idx {
                available[*r] = true;
                for k in 0..n {
                    amplitudes[(k, *r)] = fit.modes[fit_idx].amplitudes[k];
                }
            }
        }
        segments.push(Segment {
            initial_state: x0,
            amplitudes,
            available,
            id,
            scenario_id,
            fit_residual_rms: fit.residual_rms,
        });
    }

    let epf = compute_epf(&segments, ms.state_rms().view(), cfg.amplitude_floor, Space::X)?;
    let report_indices = reported_modes(&reference, &cfg.tracked)?;
    let mut columns = Vec::new();
    for &mode in &report_indices {
        let raw: Vec<Option<Complex64>> = (0..n).map(|k| epf.entry(k, mode)).collect();
        let counts: Vec<usize> = (0..n).map(|k| epf.counts[(k, mode)]).collect();
        let dispersion: Vec<f64> = (0..n).map(|k| epf.dispersion[(k, mode)]).collect();
        columns.push((reference[mode], raw, Vec::new(), counts, dispersion));
    }

    let mut flags = Vec::new();
    if low_confidence {
        flags.push("low-confidence-order".to_string());
    }
    let conditioning = worst_conditioning(ms, &cfg.conditioning);
    if conditioning.as_ref().is_some_and(|c| c.warning) {
        flags.push("ill-conditioned-sampling".to_string());
    }

    Ok(PFReport {
        labels: ms.labels().to_vec(),
        modes: build_mode_estimates(&columns),
        provenance: Provenance {
            estimator_mode: "blackbox".to_string(),
            prony_order: order,
            pairs: Vec::new(),
            segments: segments
                .iter()
                .map(|seg| SegmentRecord {
                    scenario_id: seg.scenario_id.clone(),
                    scenario: seg.id.scenario,
                    sample: seg.id.sample,
                    x0: seg.initial_state.to_vec(),
                    fit_residual_rms: seg.fit_residual_rms,
                })
                .collect(),
            transformation: Some(TransformationRecord::from_transformation(&t)),
            z_shapes: Vec::new(),
            subspace_groups: Vec::new(),
        },
        conditioning,
        errors: None,
        flags,
    })
}

/// Sub-space strategy: run the full pipeline on coordinate projections and
/// stitch the relative factors into system-wide columns.
pub fn estimate_mpf_subspace(
    ms: &MeasurementSet,
    groups: &[Vec<usize>],
    cfg: &EstimatorConfig,
) -> Result<PFReport> {
    let n = ms.dim();
    if groups.is_empty() {
        return Err(Error::DisconnectedGroups {
            detail: "no groups given".into(),
        });
    }
    let mut covered = vec![false; n];
    for group in groups {
        if group.len() < 2 {
            return Err(Error::DisconnectedGroups {
                detail: format!("group {group:?} has fewer than two states"),
            });
        }
        for &k in group {
            if k >= n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: k,
                    context: "sub-space group index".into(),
                });
            }
            covered[k] = true;
        }
    }
    if covered.iter().any(|c| !c) {
        let missing: Vec<usize> = (0..n).filter(|&k| !covered[k]).collect();
        return Err(Error::DisconnectedGroups {
            detail: format!("states {missing:?} belong to no group"),
        });
    }

    // Run the full pipeline per projected group.
    let mut group_reports = Vec::with_capacity(groups.len());
    for group in groups {
        let sub = project_measurements(ms, group)?;
        let mut sub_cfg = cfg.clone();
        sub_cfg.tracked = TrackedModes::All;
        sub_cfg.target_pairs = Some(cfg.target_pairs.unwrap_or(1usize << group.len().min(4)));
        // Projected signals still carry every system mode.
        sub_cfg.max_order = Some(cfg.max_order.unwrap_or(n));
        let report = estimate_mpf_full(&sub, &sub_cfg)?;
        group_reports.push(report);
    }

    stitch_group_reports(ms, groups, group_reports, cfg)
}

fn project_measurements(ms: &MeasurementSet, group: &[usize]) -> Result<MeasurementSet> {
    let trajectories: Result<Vec<crate::simgen::Trajectory>> = ms
        .trajectories()
        .iter()
        .map(|traj| {
            let states = Array2::from_shape_fn((traj.len(), group.len()), |(t, g)| {
                traj.states()[(t, group[g])]
            });
            crate::simgen::Trajectory::new(traj.times().to_vec(), states, traj.scenario_id())
        })
        .collect();
    let labels = group.iter().map(|&k| ms.labels()[k].clone()).collect();
    MeasurementSet::new(trajectories?, labels)
}

/// Eigenvalue matching tolerance when aligning modes across sub-space
/// groups; relative with an absolute floor, like the fit-mode matcher.
fn stitch_tolerance(lambda: Complex64) -> f64 {
    0.05 * lambda.norm() + 0.01
}

fn stitch_group_reports(
    ms: &MeasurementSet,
    groups: &[Vec<usize>],
    group_reports: Vec<PFReport>,
    cfg: &EstimatorConfig,
) -> Result<PFReport> {
    let n = ms.dim();

    // Cluster reported modes across groups by eigenvalue proximity.
    struct Cluster {
        hz: f64,
        lambda: Complex64,
        members: Vec<(usize, usize)>, // (group index, mode index)
    }
    let mut clusters: Vec<Cluster> = Vec::new();
    for (g, report) in group_reports.iter().enumerate() {
        for (m, mode) in report.modes.iter().enumerate() {
            let found = clusters
                .iter_mut()
                .find(|c| (c.lambda - mode.lambda_c()).norm() <= stitch_tolerance(c.lambda));
            match found {
                Some(c) => c.members.push((g, m)),
                None => clusters.push(Cluster {
                    hz: mode.frequency_hz,
                    lambda: mode.lambda_c(),
                    members: vec![(g, m)],
                }),
            }
        }
    }
    // Deterministic mode ordering, matching the decomposition convention.
    clusters.sort_by(|a, b| {
        b.lambda
            .im
            .abs()
            .partial_cmp(&a.lambda.im.abs())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(
                b.lambda
                    .re
                    .partial_cmp(&a.lambda.re)
                    .unwrap_or(std::cmp::Ordering::Equal),
            )
    });

    let mut modes = Vec::new();
    for cluster in &clusters {
        let mut value: Vec<Option<f64>> = vec![None; n];
        let mut counts = vec![0usize; n];
        let mut dispersion = vec![0.0f64; n];
        let mut flags: Vec<String> = Vec::new();

        // Scale linking across the groups observing this mode: breadth
        // first from the first observer, linked through shared states.
        let observers = &cluster.members;
        let mut scale: Vec<Option<f64>> = vec![None; observers.len()];
        scale[0] = Some(1.0);
        let mut progressed = true;
        while progressed {
            progressed = false;
            for a in 0..observers.len() {
                if scale[a].is_none() {
                    continue;
                }
                for b in 0..observers.len() {
                    if scale[b].is_some() {
                        continue;
                    }
                    if let Some(s) = link_scale(
                        groups,
                        &group_reports,
                        observers[a],
                        observers[b],
                        scale[a].unwrap(),
                    ) {
                        scale[b] = Some(s);
                        progressed = true;
                    }
                }
            }
        }
        // Unlinked observers fall back to their own normalization: the
        // shared mode itself acts as the scale anchor.
        if scale.iter().any(|s| s.is_none()) && observers.len() > 1 {
            flags.push("stitched-by-normalization".to_string());
        }
        for s in scale.iter_mut() {
            if s.is_none() {
                *s = Some(1.0);
            }
        }

        for (obs_idx, &(g, m)) in observers.iter().enumerate() {
            let mode = &group_reports[g].modes[m];
            let factor = scale[obs_idx].unwrap();
            for (local, &global) in groups[g].iter().enumerate() {
                if value[global].is_some() {
                    continue; // first observing group in caller order wins
                }
                if let Some(v) = mode.normalized[local] {
                    value[global] = Some(v * factor);
                    counts[global] = mode.counts[local];
                    dispersion[global] = mode.dispersion[local];
                }
            }
        }

        let max = value.iter().flatten().cloned().fold(0.0f64, f64::max);
        if max <= 0.0 {
            continue;
        }
        let normalized: Vec<Option<f64>> = value.iter().map(|v| v.map(|x| x / max)).collect();
        modes.push(ModeEstimate {
            lambda: (cluster.lambda.re, cluster.lambda.im),
            frequency_hz: cluster.hz,
            raw: normalized
                .iter()
                .map(|v| v.map(|x| (x, 0.0)))
                .collect(),
            normalized,
            counts,
            dispersion,
            flags,
        });
    }

    // Honor a tracked-mode subset on the stitched result.
    if let TrackedModes::ByFrequency { targets } = &cfg.tracked {
        let mut picked = Vec::new();
        for target in targets {
            let best = modes
                .iter()
                .enumerate()
                .map(|(i, m)| (i, (m.frequency_hz - target.hz).abs()))
                .filter(|(_, d)| *d <= target.tol_hz)
                .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal));
            match best {
                Some((i, _)) => {
                    if !picked.contains(&i) {
                        picked.push(i)
                    }
                }
                None => {
                    return Err(Error::NoTrackedMode {
                        hz: target.hz,
                        tol: target.tol_hz,
                    })
                }
            }
        }
        picked.sort_unstable();
        modes = picked.into_iter().map(|i| modes[i].clone()).collect();
    }

    let conditioning = worst_conditioning(ms, &cfg.conditioning);
    let mut flags = Vec::new();
    if conditioning.as_ref().is_some_and(|c| c.warning) {
        flags.push("ill-conditioned-sampling".to_string());
    }

    // Merge per-group provenance.
    let mut provenance = Provenance {
        estimator_mode: "subspace".to_string(),
        prony_order: group_reports
            .first()
            .map(|r| r.provenance.prony_order)
            .unwrap_or(0),
        subspace_groups: groups.to_vec(),
        ..Default::default()
    };
    for report in &group_reports {
        provenance.pairs.extend(report.provenance.pairs.clone());
        provenance
            .segments
            .extend(report.provenance.segments.clone());
    }

    Ok(PFReport {
        labels: ms.labels().to_vec(),
        modes,
        provenance,
        conditioning,
        errors: None,
        flags,
    })
}

/// Scale linking one observer to another through their highest-magnitude
/// shared state.
fn link_scale(
    groups: &[Vec<usize>],
    reports: &[PFReport],
    from: (usize, usize),
    to: (usize, usize),
    from_scale: f64,
) -> Option<f64> {
    let (ga, ma) = from;
    let (gb, mb) = to;
    let mode_a = &reports[ga].modes[ma];
    let mode_b = &reports[gb].modes[mb];
    let mut best: Option<(f64, f64)> = None; // (min magnitude, scale)
    for (la, &sa) in groups[ga].iter().enumerate() {
        for (lb, &sb) in groups[gb].iter().enumerate() {
            if sa != sb {
                continue;
            }
            let (Some(va), Some(vb)) = (mode_a.normalized[la], mode_b.normalized[lb]) else {
                continue;
            };
            if vb.abs() < 1e-9 || va.abs() < 1e-9 {
                continue;
            }
            let strength = va.abs().min(vb.abs());
            let scale = va * from_scale / vb;
            if best.map_or(true, |(s, _)| strength > s) {
                best = Some((strength, scale));
            }
        }
    }
    best.map(|(_, s)| s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linmodel::{modal_decompose, participation_matrix, test_support, LinearSystem};
    use crate::simgen::{analytic_response, modal_amplitudes_exact, MeasurementSet, Trajectory};
    use ndarray::array;

    fn segment_from_exact(
        dec: &ModalDecomposition,
        x0: Array1<f64>,
        idx: usize,
    ) -> Segment {
        let n = dec.dim();
        let amps = modal_amplitudes_exact(dec, x0.view()).unwrap();
        Segment {
            initial_state: x0,
            amplitudes: amps.values,
            available: vec![true; n],
            id: SampleId {
                scenario: idx,
                sample: 0,
            },
            scenario_id: format!("s{idx:03}"),
            fit_residual_rms: 0.0,
        }
    }

    fn box_vertices(half: &[f64]) -> Vec<Array1<f64>> {
        let n = half.len();
        (0..(1usize << n))
            .map(|mask| {
                Array1::from_shape_fn(n, |k| {
                    if mask >> k & 1 == 1 {
                        half[k]
                    } else {
                        -half[k]
                    }
                })
            })
            .collect()
    }

    #[test]
    fn epf_of_diagonal_system_axis_vertices_is_identity() {
        let sys = LinearSystem::with_default_labels(array![[-1.0, 0.0], [0.0, -2.0]]).unwrap();
        let dec = modal_decompose(&sys).unwrap();
        let segments: Vec<Segment> = box_vertices(&[1.0, 1.0])
            .into_iter()
            .enumerate()
            .map(|(i, x0)| segment_from_exact(&dec, x0, i))
            .collect();
        let rms = Array1::from_elem(2, 1.0);
        let epf = compute_epf(&segments, rms.view(), 1e-6, Space::X).unwrap();
        for k in 0..2 {
            for i in 0..2 {
                let expect = if k == i { 1.0 } else { 0.0 };
                let got = epf.values[(k, i)];
                assert!((got - Complex64::new(expect, 0.0)).norm() < 1e-12);
                assert_eq!(epf.counts[(k, i)], 4);
            }
        }
    }

    #[test]
    fn single_segment_epf_is_amplitude_ratio() {
        let sys = test_support::seeded_stable_system(3, 0xE9F);
        let dec = modal_decompose(&sys).unwrap();
        let x0 = array![0.8, -0.5, 0.3];
        let amps = modal_amplitudes_exact(&dec, x0.view()).unwrap();
        let segments = vec![segment_from_exact(&dec, x0.clone(), 0)];
        let rms = x0.map(|v| v.abs());
        let epf = compute_epf(&segments, rms.view(), 1e-6, Space::X).unwrap();
        for k in 0..3 {
            for i in 0..3 {
                let expect = amps.values[(k, i)] / x0[k];
                assert!((epf.values[(k, i)] - expect).norm() < 1e-14);
                assert_eq!(epf.counts[(k, i)], 1);
                assert_eq!(epf.dispersion[(k, i)], 0.0);
            }
        }
    }

    #[test]
    fn rectangle_vertices_make_epf_equal_pf() {
        let sys = LinearSystem::with_default_labels(array![[0.0, 1.0], [-2.0, -0.1]]).unwrap();
        let dec = modal_decompose(&sys).unwrap();
        let pf = participation_matrix(&dec);
        let segments: Vec<Segment> = box_vertices(&[1.0, 1.0])
            .into_iter()
            .enumerate()
            .map(|(i, x0)| segment_from_exact(&dec, x0, i))
            .collect();
        let rms = Array1::from_elem(2, 1.0);
        let epf = compute_epf(&segments, rms.view(), 1e-6, Space::X).unwrap();
        for k in 0..2 {
            for i in 0..2 {
                let diff = (epf.values[(k, i)] - pf.values()[(k, i)]).norm();
                assert!(diff <= 1e-8, "EPF vs PF diff {diff:e}");
            }
        }
    }

    #[test]
    fn near_zero_initial_components_are_excluded() {
        let sys = test_support::seeded_stable_system(2, 0xF10);
        let dec = modal_decompose(&sys).unwrap();
        let segments = vec![
            segment_from_exact(&dec, array![1.0, 1e-12], 0),
            segment_from_exact(&dec, array![-1.0, 1.0], 1),
        ];
        let rms = Array1::from_elem(2, 1.0);
        let epf = compute_epf(&segments, rms.view(), 1e-6, Space::X).unwrap();
        // State 1 of segment 0 falls below the floor: only one usable term.
        assert_eq!(epf.counts[(1, 0)], 1);
        assert_eq!(epf.counts[(0, 0)], 2);
    }

    #[test]
    fn residual_vanishes_on_symmetric_sets_and_grows_linearly() {
        let sys = test_support::seeded_stable_system(3, 0xE55);
        let dec = modal_decompose(&sys).unwrap();
        let base = box_vertices(&[0.9, 0.6, 1.2]);
        for k in 0..3 {
            for i in 0..3 {
                let r = epf_equals_pf_residual(&dec, &base, k, i).unwrap();
                assert!(r.norm() <= 1e-12);
            }
        }
        // Perturb one vertex: the residual is linear in the perturbation.
        let direction = array![0.3, -0.5, 0.2];
        let mut r1_set = base.clone();
        r1_set[0] = &r1_set[0] + &(&direction * 0.01);
        let mut r2_set = base.clone();
        r2_set[0] = &r2_set[0] + &(&direction * 0.02);
        let r1 = epf_equals_pf_residual(&dec, &r1_set, 0, 1).unwrap();
        let r2 = epf_equals_pf_residual(&dec, &r2_set, 0, 1).unwrap();
        let ratio = r2.norm() / r1.norm();
        assert!((ratio - 2.0).abs() < 0.05, "ratio {ratio}");
    }

    /// Mirrored parallelotope vertex dataset plus a scaled copy, wide
    /// enough that every selected pair is a vertex pair.
    fn vertex_dataset(
        dec: &ModalDecomposition,
        edges: &Array2<f64>,
        dt: f64,
        samples: usize,
    ) -> (MeasurementSet, usize) {
        let n = dec.dim();
        let half = Array1::from_elem(n, 0.5);
        let times: Vec<f64> = (0..samples).map(|i| i as f64 * dt).collect();
        let mut trajectories = Vec::new();
        let mut idx = 0;
        for scale in [1.0, 3.0] {
            for mask in 0..(1usize << n) {
                let a = Array1::from_shape_fn(n, |k| if mask >> k & 1 == 1 { 1.0 } else { 0.0 });
                let x0 = edges.dot(&(&a - &half)) * scale;
                let traj = analytic_response(dec, x0.view(), &times)
                    .unwrap()
                    .with_scenario_id(format!("v{idx:03}"));
                trajectories.push(traj);
                idx += 1;
            }
        }
        let labels = (0..n).map(|k| format!("x{}", k + 1)).collect();
        let ms = MeasurementSet::new(trajectories, labels).unwrap();
        let pair_target = 1usize << n; // both copies' vertex pairs
        (ms, pair_target)
    }

    fn crisp_edges(n: usize, seed: u64) -> Array2<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        loop {
            let m: Array2<f64> = Array2::from_shape_fn((n, n), |(i, j)| {
                let base = if i == j { 1.0 } else { 0.0 };
                base + rng.gen_range(-0.12..0.12)
            });
            let ok = crate::linalg::cond2(&m).map(|c| c <= 1.35).unwrap_or(false);
            if ok {
                return m;
            }
        }
    }

    fn exact_pipeline_cfg(pair_target: usize) -> EstimatorConfig {
        EstimatorConfig {
            symmetry: SymmetryConfig {
                r_threshold: Some(1e-3),
                candidate_stride: 7,
                ..Default::default()
            },
            target_pairs: Some(pair_target),
            window: Some(320),
            ..Default::default()
        }
    }

    #[test]
    fn full_pipeline_matches_model_pf_on_exact_vertices() {
        let sys = test_support::seeded_stable_system(4, 0xF11);
        let dec = modal_decompose(&sys).unwrap();
        let pf = participation_matrix(&dec);
        let edges = crisp_edges(4, 0xE46E);
        let (ms, pair_target) = vertex_dataset(&dec, &edges, 0.02, 400);
        let report = estimate_mpf_full(&ms, &exact_pipeline_cfg(pair_target)).unwrap();
        assert_eq!(report.provenance.prony_order, 4);

        for mode in &report.modes {
            // Match the reported mode to the model mode by eigenvalue.
            let lambda = mode.lambda_c();
            let (model_idx, dist) = dec
                .eigenvalues()
                .iter()
                .enumerate()
                .map(|(i, l)| (i, (l - lambda).norm()))
                .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                .unwrap();
            assert!(dist <= 1e-6 * (1.0 + lambda.norm()), "mode match {dist:e}");
            let model_col = crate::linmodel::normalize_pf_column(&pf, model_idx).unwrap();
            for k in 0..4 {
                let got = mode.normalized[k].unwrap();
                let want = model_col[k];
                if want >= 0.05 {
                    assert!(
                        (got - want).abs() <= 1e-3 * want,
                        "state {k}: {got} vs {want}"
                    );
                }
            }
        }
    }

    #[test]
    fn blackbox_on_symmetric_data_matches_model_pf() {
        let sys = test_support::seeded_stable_system(3, 0xB1ACB);
        let dec = modal_decompose(&sys).unwrap();
        let pf = participation_matrix(&dec);
        let times: Vec<f64> = (0..400).map(|i| i as f64 * 0.02).collect();
        let trajectories: Vec<Trajectory> = box_vertices(&[0.8, 1.1, 0.6])
            .into_iter()
            .enumerate()
            .map(|(i, x0)| {
                analytic_response(&dec, x0.view(), &times)
                    .unwrap()
                    .with_scenario_id(format!("b{i}"))
            })
            .collect();
        let ms = MeasurementSet::new(trajectories, sys.labels().to_vec()).unwrap();
        let report = estimate_mpf_blackbox(&ms, &EstimatorConfig::default()).unwrap();
        for mode in &report.modes {
            let lambda = mode.lambda_c();
            let (model_idx, _) = dec
                .eigenvalues()
                .iter()
                .enumerate()
                .map(|(i, l)| (i, (l - lambda).norm()))
                .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                .unwrap();
            let model_col = crate::linmodel::normalize_pf_column(&pf, model_idx).unwrap();
            for k in 0..3 {
                let got = mode.normalized[k].unwrap();
                if model_col[k] >= 0.05 {
                    assert!((got - model_col[k]).abs() <= 1e-6 * model_col[k].max(1e-3));
                }
            }
        }
    }

    #[test]
    fn identity_scaled_dataset_matches_blackbox_epf() {
        // A dataset whose selected parallelotope is an axis-aligned box:
        // H is diagonal, so z-space EPFs coincide with x-space EPFs and the
        // full pipeline must agree with the black-box shortcut.
        let sys = test_support::seeded_stable_system(3, 0x1DE);
        let dec = modal_decompose(&sys).unwrap();
        let edges = Array2::<f64>::eye(3);
        let (ms, pair_target) = vertex_dataset(&dec, &edges, 0.02, 400);
        let full = estimate_mpf_full(&ms, &exact_pipeline_cfg(pair_target)).unwrap();
        let mut bb_cfg = EstimatorConfig::default();
        bb_cfg.window = Some(320);
        let blackbox = estimate_mpf_blackbox(&ms, &bb_cfg).unwrap();
        for fm in &full.modes {
            let bm = blackbox
                .modes
                .iter()
                .min_by(|a, b| {
                    (a.frequency_hz - fm.frequency_hz)
                        .abs()
                        .partial_cmp(&(b.frequency_hz - fm.frequency_hz).abs())
                        .unwrap()
                })
                .unwrap();
            for k in 0..3 {
                let a = fm.normalized[k].unwrap();
                let b = bm.normalized[k].unwrap();
                assert!((a - b).abs() <= 1e-9, "state {k}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn partial_with_full_shapes_matches_full_estimate() {
        let sys = test_support::seeded_stable_system(4, 0xF12);
        let dec = modal_decompose(&sys).unwrap();
        let edges = crisp_edges(4, 0xE47);
        let (ms, pair_target) = vertex_dataset(&dec, &edges, 0.02, 400);
        let cfg = exact_pipeline_cfg(pair_target);
        let full = estimate_mpf_full(&ms, &cfg).unwrap();

        // Reuse the transformation and the estimated shapes from the full
        // run.
        let trec = full.provenance.transformation.as_ref().unwrap();
        let n = ms.dim();
        let e = Array2::from_shape_fn((n, n), |(i, j)| trec.h_inv[i][j]);
        let vs = crate::transform::VertexSet::from_vertices(
            Array1::zeros(n),
            (0..n).map(|j| e.column(j).to_owned()).collect(),
        )
        .unwrap();
        let t = crate::transform::build_transformation(&vs).unwrap();
        let lambdas: Vec<Complex64> = full
            .provenance
            .z_shapes
            .iter()
            .map(|s| Complex64::new(s.lambda.0, s.lambda.1))
            .collect();
        let shapes = Array2::from_shape_fn((n, lambdas.len()), |(k, i)| {
            let (re, im) = full.provenance.z_shapes[i].shape[k];
            Complex64::new(re, im)
        });
        let partial = estimate_mpf_partial(&ms, &lambdas, &shapes, &t, &cfg).unwrap();
        assert_eq!(partial.modes.len(), full.modes.len());
        for (pm, fm) in partial.modes.iter().zip(&full.modes) {
            for k in 0..n {
                let a = pm.normalized[k].unwrap();
                let b = fm.normalized[k].unwrap();
                assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn tracked_single_mode_of_diagonal_system_is_exact() {
        // Decoupled oscillators: track only the faster pair.
        let sys = LinearSystem::with_default_labels(array![
            [0.0, 1.0, 0.0, 0.0],
            [-4.0, -0.1, 0.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
            [0.0, 0.0, -1.0, -0.05],
        ])
        .unwrap();
        let dec = modal_decompose(&sys).unwrap();
        let pf = participation_matrix(&dec);
        let edges = Array2::<f64>::eye(4);
        let (ms, pair_target) = vertex_dataset(&dec, &edges, 0.02, 400);
        let mut cfg = exact_pipeline_cfg(pair_target);
        let hz = dec.eigenvalues()[0].im.abs() / std::f64::consts::TAU;
        cfg.tracked = TrackedModes::ByFrequency {
            targets: vec![FrequencyTarget {
                hz,
                tol_hz: 0.05,
            }],
        };
        let report = estimate_mpf_full(&ms, &cfg).unwrap();
        assert_eq!(report.modes.len(), 1);
        let model_col = crate::linmodel::normalize_pf_column(&pf, 0).unwrap();
        for k in 0..4 {
            let got = report.modes[0].normalized[k].unwrap();
            assert!((got - model_col[k]).abs() <= 1e-6 + 1e-3 * model_col[k]);
        }
    }

    #[test]
    fn back_transformation_is_identity_with_model_shapes() {
        // Model-side consistency: build PF_z from the model and map back.
        let sys = test_support::seeded_stable_system(4, 0x9AB);
        let dec = modal_decompose(&sys).unwrap();
        let pf_x = participation_matrix(&dec);
        let n = 4;
        let e = crisp_edges(n, 0x7777);
        let vs = crate::transform::VertexSet::from_vertices(
            Array1::zeros(n),
            (0..n).map(|j| e.column(j).to_owned()).collect(),
        )
        .unwrap();
        let t = crate::transform::build_transformation(&vs).unwrap();

        let hc = t.h().map(|v| Complex64::new(*v, 0.0));
        let hinv_c = t.h_inv().map(|v| Complex64::new(*v, 0.0));
        let phi_z = hc.dot(dec.right_eigenvectors());
        let psi_z = dec.left_eigenvectors().dot(&hinv_c);
        // PF_z = Phi_z o Psi_z^T, then per-mode back-transformation.
        let mut pf_z_vals = Array2::<Complex64>::zeros((n, n));
        for k in 0..n {
            for i in 0..n {
                pf_z_vals[(k, i)] = phi_z[(k, i)] * psi_z[(i, k)];
            }
        }
        let pf_z = EpfTable {
            values: pf_z_vals,
            counts: Array2::from_elem((n, n), 1),
            dispersion: Array2::zeros((n, n)),
            space: Space::Z,
        };
        for mode in 0..n {
            let shape = phi_z.column(mode).to_owned();
            let (raw, excluded) = pf_column_to_x(&pf_z, mode, &shape, &t, 1e-8);
            assert!(excluded.is_empty());
            for k in 0..n {
                let got = raw[k].unwrap();
                let want = pf_x.values()[(k, mode)];
                assert!(
                    (got - want).norm() <= 1e-9 * (1.0 + want.norm()),
                    "mode {mode} state {k}: {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn subspace_single_group_equals_full() {
        let sys = test_support::seeded_stable_system(3, 0x5AB5);
        let dec = modal_decompose(&sys).unwrap();
        let edges = crisp_edges(3, 0x3E3);
        let (ms, pair_target) = vertex_dataset(&dec, &edges, 0.02, 400);
        let cfg = exact_pipeline_cfg(pair_target);
        let full = estimate_mpf_full(&ms, &cfg).unwrap();
        let sub = estimate_mpf_subspace(&ms, &[vec![0, 1, 2]], &cfg).unwrap();
        for fm in &full.modes {
            let sm = sub
                .modes
                .iter()
                .min_by(|a, b| {
                    (a.lambda_c() - fm.lambda_c())
                        .norm()
                        .partial_cmp(&(b.lambda_c() - fm.lambda_c()).norm())
                        .unwrap()
                })
                .unwrap();
            for k in 0..3 {
                let a = fm.normalized[k].unwrap();
                let b = sm.normalized[k].unwrap();
                assert!((a - b).abs() <= 1e-9);
            }
        }
    }

    /// Scenario starts zipping the same 2-D rectangle vertex into both
    /// blocks, at two scales, so each block projection sees all four
    /// distinct vertices.
    fn zipped_block_dataset(dec: &ModalDecomposition, dt: f64, samples: usize) -> MeasurementSet {
        let times: Vec<f64> = (0..samples).map(|i| i as f64 * dt).collect();
        let corners = [(-0.5, -0.5), (0.5, -0.5), (-0.5, 0.5), (0.5, 0.5)];
        let mut trajectories = Vec::new();
        let mut idx = 0;
        for scale in [1.0, 3.0] {
            for (a, b) in corners {
                let x0 = array![a * scale, b * scale, a * scale, b * scale];
                trajectories.push(
                    analytic_response(dec, x0.view(), &times)
                        .unwrap()
                        .with_scenario_id(format!("z{idx:03}")),
                );
                idx += 1;
            }
        }
        let labels = (0..4).map(|k| format!("x{}", k + 1)).collect();
        MeasurementSet::new(trajectories, labels).unwrap()
    }

    #[test]
    fn subspace_recovers_local_modes_of_decoupled_blocks() {
        let sys = LinearSystem::with_default_labels(array![
            [0.0, 1.0, 0.0, 0.0],
            [-4.0, -0.1, 0.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
            [0.0, 0.0, -1.0, -0.05],
        ])
        .unwrap();
        let dec = modal_decompose(&sys).unwrap();
        let pf = participation_matrix(&dec);
        let ms = zipped_block_dataset(&dec, 0.02, 400);
        let mut cfg = EstimatorConfig::default();
        cfg.symmetry.r_threshold = Some(1e-3);
        cfg.symmetry.candidate_stride = 7;
        cfg.window = Some(320);
        cfg.target_pairs = Some(4);
        let report = estimate_mpf_subspace(&ms, &[vec![0, 1], vec![2, 3]], &cfg).unwrap();
        // Two oscillatory modes, each observed in its own block.
        for mode in &report.modes {
            let lambda = mode.lambda_c();
            let (model_idx, _) = dec
                .eigenvalues()
                .iter()
                .enumerate()
                .map(|(i, l)| (i, (l - lambda).norm()))
                .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                .unwrap();
            let model_col = crate::linmodel::normalize_pf_column(&pf, model_idx).unwrap();
            for k in 0..4 {
                match mode.normalized[k] {
                    Some(got) => {
                        assert!(
                            (got - model_col[k]).abs() <= 1e-3,
                            "state {k}: {got} vs {}",
                            model_col[k]
                        );
                    }
                    None => {
                        // Uncovered states carry no estimate; the model PF
                        // there is zero for a decoupled block.
                        assert!(model_col[k] <= 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn disconnected_groups_are_rejected() {
        let sys = test_support::seeded_stable_system(4, 0xD15C);
        let dec = modal_decompose(&sys).unwrap();
        let edges = Array2::<f64>::eye(4);
        let (ms, _) = vertex_dataset(&dec, &edges, 0.02, 200);
        let cfg = EstimatorConfig::default();
        assert!(matches!(
            estimate_mpf_subspace(&ms, &[vec![0, 1]], &cfg),
            Err(Error::DisconnectedGroups { .. })
        ));
        assert!(matches!(
            estimate_mpf_subspace(&ms, &[vec![0], vec![1, 2, 3]], &cfg),
            Err(Error::DisconnectedGroups { .. })
        ));
    }

    #[test]
    fn report_serializes_and_round_trips() {
        let sys = test_support::seeded_stable_system(3, 0x3E4);
        let dec = modal_decompose(&sys).unwrap();
        let edges = Array2::<f64>::eye(3);
        let (ms, pair_target) = vertex_dataset(&dec, &edges, 0.02, 300);
        let report = estimate_mpf_full(&ms, &exact_pipeline_cfg(pair_target)).unwrap();
        let json = report.to_json();
        let back = PFReport::from_json(&json).unwrap();
        assert_eq!(back.labels, report.labels);
        assert_eq!(back.modes.len(), report.modes.len());
        let csv = report.to_csv();
        assert!(csv.starts_with("state,mode_hz"));
        assert!(csv.lines().count() > report.modes.len());
    }
}
