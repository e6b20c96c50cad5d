//! Error indices and conditioning analysis for participation estimates.
//!
//! Two error measures qualify an estimate against a model oracle: `e1`,
//! the exact bias of the extended participation factor caused by an
//! asymmetric initial-state set, and `e2`, the relative error of
//! participation ratios between two states. Independently of any model,
//! the mutual coherence of the sampling matrix (the time-by-state data
//! matrix) bounds its condition number from below,
//!
//! ```text
//! cond(S) >= ||S||_2 / sqrt(||s_i||^2 + ||s_j||^2 - 2 ||s_i|| ||s_j|| gamma)
//! ```
//!
//! which diverges as the worst column pair becomes proportional
//! (gamma -> 1); in that regime participation estimates from the data are
//! untrustworthy and the report carries a warning.

use ndarray::ArrayView2;
use ndarray_linalg::SVD;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linmodel::ModalDecomposition;

/// Warning thresholds for the conditioning analysis.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ConditioningThresholds {
    pub gamma_warn: f64,
    pub cond_warn: f64,
}

impl Default for ConditioningThresholds {
    fn default() -> Self {
        Self {
            gamma_warn: 0.95,
            cond_warn: 1e3,
        }
    }
}

/// Coherence and condition diagnostics of one sampling matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditioningReport {
    /// Largest normalized inner product over distinct column pairs.
    pub gamma: f64,
    /// Column pair attaining `gamma`.
    pub pair: (usize, usize),
    /// Lower bound on cond(S) from the coherent pair; `None` until the
    /// bound has been computed, infinite when the pair is exactly
    /// proportional.
    pub condition_lower_bound: Option<f64>,
    /// Direct SVD estimate sigma_max / sigma_min.
    pub condition_estimate: Option<f64>,
    pub warning: bool,
}

fn column_norms(s: &ArrayView2<'_, f64>) -> Result<Vec<f64>> {
    let mut norms = Vec::with_capacity(s.ncols());
    for (j, col) in s.columns().into_iter().enumerate() {
        let n = col.dot(&col).sqrt();
        if n < 1e-30 {
            return Err(Error::ZeroColumn {
                column: j,
                floor: 1e-30,
            });
        }
        norms.push(n);
    }
    Ok(norms)
}

/// Mutual coherence: exhaustive pairwise normalized inner products.
pub fn coherence(s: ArrayView2<'_, f64>, thresholds: &ConditioningThresholds) -> Result<ConditioningReport> {
    let m = s.ncols();
    if m < 2 {
        return Err(Error::DimensionMismatch {
            expected: 2,
            got: m,
            context: "coherence needs at least two columns".into(),
        });
    }
    let norms = column_norms(&s)?;
    let mut gamma = -1.0;
    let mut pair = (0, 1);
    for i in 0..m {
        for j in (i + 1)..m {
            let dot = s.column(i).dot(&s.column(j));
            let g = dot.abs() / (norms[i] * norms[j]);
            if g > gamma {
                gamma = g;
                pair = (i, j);
            }
        }
    }
    Ok(ConditioningReport {
        gamma,
        pair,
        condition_lower_bound: None,
        condition_estimate: None,
        warning: gamma > thresholds.gamma_warn,
    })
}

/// Complete the conditioning report: coherence-based lower bound on the
/// condition number plus the direct SVD estimate.
pub fn condition_bound(
    s: ArrayView2<'_, f64>,
    thresholds: &ConditioningThresholds,
) -> Result<ConditioningReport> {
    let mut report = coherence(s, thresholds)?;
    let norms = column_norms(&s)?;
    let (i, j) = report.pair;

    let (_, sv, _) = s.svd(false, false)?;
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    let estimate = if smin > 0.0 { smax / smin } else { f64::INFINITY };

    // ||s_i - sign * s_j||^2 with the sign matching the inner product:
    // exactly ni^2 + nj^2 - 2 ni nj gamma.
    let denom_sq = norms[i] * norms[i] + norms[j] * norms[j] - 2.0 * norms[i] * norms[j] * report.gamma;
    let scale = norms[i] * norms[i] + norms[j] * norms[j];
    let bound = if denom_sq <= 1e-15 * scale {
        f64::INFINITY
    } else {
        smax / denom_sq.sqrt()
    };

    report.condition_lower_bound = Some(bound);
    report.condition_estimate = Some(estimate);
    report.warning = report.gamma > thresholds.gamma_warn || estimate > thresholds.cond_warn;
    Ok(report)
}

/// Exact bias of the extended participation factor of state `k` in mode
/// `i` for a given initial-state set:
///
/// ```text
/// e1 = (1/L) sum_l sum_{j != k} psi_ij phi_ki x_j0^(l) / x_k0^(l)
/// ```
///
/// Initial states whose k-th component lies below 1e-6 of that
/// component's RMS over the set are excluded, mirroring the EPF average.
pub fn error_e1(
    dec: &ModalDecomposition,
    initial_states: &[ndarray::Array1<f64>],
    k: usize,
    i: usize,
) -> Result<Complex64> {
    let n = dec.dim();
    if initial_states.is_empty() {
        return Err(Error::NoValidSegments { state: k, mode: i });
    }
    let rms_k = (initial_states.iter().map(|x| x[k] * x[k]).sum::<f64>()
        / initial_states.len() as f64)
        .sqrt();
    let floor = 1e-6 * rms_k;
    let psi = dec.left_eigenvectors();
    let phi_ki = dec.right_eigenvectors()[(k, i)];
    let mut acc = Complex64::new(0.0, 0.0);
    let mut count = 0usize;
    for x0 in initial_states {
        if x0[k].abs() < floor {
            continue;
        }
        for j in 0..n {
            if j == k {
                continue;
            }
            acc += psi[(i, j)] * phi_ki * (x0[j] / x0[k]);
        }
        count += 1;
    }
    if count == 0 {
        return Err(Error::NoValidSegments { state: k, mode: i });
    }
    Ok(acc / count as f64)
}

/// Ratio error index between states `i` and `j` for one mode, in percent:
/// `((pf_j/pf_i) / (mpf_j/mpf_i) - 1) * 100`, computed on magnitudes with
/// sign preserved.
pub fn error_e2(pf_i: f64, pf_j: f64, mpf_i: f64, mpf_j: f64, i: usize, j: usize) -> Result<f64> {
    if pf_i <= 0.0 || pf_j <= 0.0 || mpf_i <= 0.0 || mpf_j <= 0.0 {
        return Err(Error::ZeroDenominator { i, j });
    }
    Ok(((pf_j / pf_i) / (mpf_j / mpf_i) - 1.0) * 100.0)
}

/// One e2 evaluation inside an [`ErrorReport`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct E2Entry {
    pub state_i: usize,
    pub state_j: usize,
    pub mode_hz: f64,
    pub percent: f64,
}

/// Model-vs-measurement error indices.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ErrorReport {
    /// e1 per (state, mode) over the initial-state set used by the
    /// estimate, when a model was supplied.
    pub e1: Vec<(usize, usize, (f64, f64))>,
    pub e2: Vec<E2Entry>,
    pub max_abs_e2_percent: f64,
}
