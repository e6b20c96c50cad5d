//! Least-squares Prony analysis: joint estimation of mode eigenvalues and
//! per-signal modal amplitudes from uniformly sampled ringdown signals.
//!
//! The fit runs in two stages. First a common linear-prediction polynomial
//! is solved across all signals jointly,
//!
//! ```text
//! x[t] = a_1 x[t-1] + ... + a_p x[t-p]
//! ```
//!
//! whose roots `z_r` give continuous-time eigenvalues `lambda_r = ln(z_r) /
//! dt`. Second, a Vandermonde least-squares solve recovers one complex
//! amplitude per (mode, signal). All signals of one trajectory share a
//! single eigenvalue set, which keeps mode identities aligned across
//! states.

use ndarray::{Array1, Array2, ArrayView2};
use ndarray_linalg::Eig;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::linalg::{conjugate_partners, mode_order, svd_solve_complex, svd_solve_real};

/// Magnitude below which a discrete root is treated as a dead (zero) mode
/// and dropped.
const DEAD_ROOT_FLOOR: f64 = 1e-12;

/// One estimated mode: continuous-time eigenvalue plus one complex
/// amplitude per fitted signal.
#[derive(Debug, Clone)]
pub struct PronyMode {
    pub lambda: Complex64,
    pub amplitudes: Vec<Complex64>,
}

impl PronyMode {
    pub fn frequency_hz(&self) -> f64 {
        self.lambda.im.abs() / std::f64::consts::TAU
    }
}

/// Result of a Prony fit over a sample window.
#[derive(Debug, Clone)]
pub struct PronyFit {
    pub modes: Vec<PronyMode>,
    pub model_order: usize,
    pub residual_rms: f64,
    /// Fitted sample range `[start, end)` within the signals handed in.
    pub window: (usize, usize),
    dt: f64,
    signal_count: usize,
}

impl PronyFit {
    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn signal_count(&self) -> usize {
        self.signal_count
    }

    pub fn eigenvalues(&self) -> Vec<Complex64> {
        self.modes.iter().map(|m| m.lambda).collect()
    }

    /// Real-valued reconstruction of the fitted signals over `samples`
    /// steps.
    pub fn reconstruction(&self, samples: usize) -> Array2<f64> {
        let m = self.signal_count;
        let mut out = Array2::<f64>::zeros((samples, m));
        for mode in &self.modes {
            let z = (mode.lambda * self.dt).exp();
            let mut pow = Complex64::new(1.0, 0.0);
            for t in 0..samples {
                for (sig, &b) in mode.amplitudes.iter().enumerate() {
                    out[(t, sig)] += (b * pow).re;
                }
                pow *= z;
            }
        }
        out
    }

    /// RMS of (signals - reconstruction); recomputable from the stored
    /// fields.
    pub fn residual_against(&self, signals: ArrayView2<'_, f64>) -> f64 {
        let recon = self.reconstruction(signals.nrows());
        let mut acc = 0.0;
        for (a, b) in signals.iter().zip(recon.iter()) {
            acc += (a - b) * (a - b);
        }
        (acc / (signals.nrows() * signals.ncols()) as f64).sqrt()
    }

    /// Conjugate-partner index per mode (itself for real modes).
    pub fn conjugate_pairs(&self) -> Vec<usize> {
        conjugate_partners(&self.eigenvalues(), 1e-6)
    }
}

fn signal_rms(signals: ArrayView2<'_, f64>) -> f64 {
    let count = signals.len().max(1);
    (signals.iter().map(|v| v * v).sum::<f64>() / count as f64).sqrt()
}

/// Two-stage least-squares Prony fit of `signals` (rows = samples, columns
/// = signals) at the given model order.
pub fn fit_prony(signals: ArrayView2<'_, f64>, dt: f64, order: usize) -> Result<PronyFit> {
    let t_len = signals.nrows();
    let m = signals.ncols();
    if order == 0 {
        return Err(Error::OrderTooHigh {
            order,
            required: 1,
            got: t_len,
        });
    }
    if t_len < 2 * order + 1 {
        return Err(Error::OrderTooHigh {
            order,
            required: 2 * order + 1,
            got: t_len,
        });
    }
    if dt <= 0.0 {
        return Err(Error::NonUniformTimes { index: 0 });
    }
    if !signals.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite {
            context: "prony input signals".into(),
        });
    }

    // Unobservable (all-zero) input: no identifiable modes, zero residual.
    if signal_rms(signals) == 0.0 {
        return Ok(PronyFit {
            modes: Vec::new(),
            model_order: order,
            residual_rms: 0.0,
            window: (0, t_len),
            dt,
            signal_count: m,
        });
    }

    // Stage 1: joint linear-prediction polynomial across all signals.
    let rows = m * (t_len - order);
    let mut a = Array2::<f64>::zeros((rows, order));
    let mut b = Array1::<f64>::zeros(rows);
    let mut r = 0usize;
    for sig in 0..m {
        for t in order..t_len {
            for k in 0..order {
                a[(r, k)] = signals[(t - 1 - k, sig)];
            }
            b[r] = signals[(t, sig)];
            r += 1;
        }
    }
    let (coeffs, _) = svd_solve_real(&a, b.view(), "prediction")?;

    // Roots of z^p - a_1 z^(p-1) - ... - a_p via the companion matrix.
    let mut companion = Array2::<f64>::zeros((order, order));
    for k in 0..order {
        companion[(0, k)] = coeffs[k];
    }
    for i in 1..order {
        companion[(i, i - 1)] = 1.0;
    }
    let (roots, _) = companion.eig()?;
    let kept: Vec<Complex64> = roots
        .iter()
        .filter(|z| z.norm() > DEAD_ROOT_FLOOR)
        .cloned()
        .collect();

    // Stage 2: Vandermonde least squares for amplitudes, one solve for all
    // signals.
    let p = kept.len();
    let mut fit = PronyFit {
        modes: Vec::new(),
        model_order: order,
        residual_rms: 0.0,
        window: (0, t_len),
        dt,
        signal_count: m,
    };
    if p > 0 {
        let mut vand = Array2::<Complex64>::zeros((t_len, p));
        for (r, root) in kept.iter().enumerate() {
            let mut pow = Complex64::new(1.0, 0.0);
            for t in 0..t_len {
                vand[(t, r)] = pow;
                pow *= root;
            }
        }
        let rhs = signals.map(|&v| Complex64::new(v, 0.0));
        let (amps, _) = svd_solve_complex(&vand, rhs.view(), "vandermonde")?;

        let lambdas: Vec<Complex64> = kept
            .iter()
            .map(|z| Complex64::new(z.norm().ln(), z.arg()) / dt)
            .collect();
        let order_perm = mode_order(&lambdas);
        for &idx in &order_perm {
            fit.modes.push(PronyMode {
                lambda: lambdas[idx],
                amplitudes: amps.row(idx).to_vec(),
            });
        }
    }
    fit.residual_rms = fit.residual_against(signals);
    Ok(fit)
}

/// Outcome of automatic model-order selection.
#[derive(Debug, Clone, Copy)]
pub struct SelectedOrder {
    pub order: usize,
    /// Residual RMS of the chosen fit divided by the signal RMS.
    pub residual_ratio: f64,
}

impl SelectedOrder {
    /// True when even the best order leaves most of the signal unexplained.
    pub fn low_confidence(&self) -> bool {
        self.residual_ratio > 0.5
    }
}

/// Smallest order whose residual falls below 1e-6 of the signal RMS;
/// otherwise the residual-minimizing order among those supported by the
/// numerical rank of the prediction system (singular values above 1e-8
/// relative stay usable, rank exhaustion stops the scan).
pub fn select_order(
    signals: ArrayView2<'_, f64>,
    dt: f64,
    max_order: usize,
) -> Result<SelectedOrder> {
    if max_order == 0 {
        return Err(Error::OrderTooHigh {
            order: 0,
            required: 1,
            got: signals.nrows(),
        });
    }
    let rms = signal_rms(signals);
    if rms == 0.0 {
        return Ok(SelectedOrder {
            order: 1,
            residual_ratio: 0.0,
        });
    }
    let mut best: Option<SelectedOrder> = None;
    for order in 1..=max_order {
        let fit = match fit_prony(signals, dt, order) {
            Ok(f) => f,
            // Prediction rank exhausted; higher orders only get worse.
            Err(Error::IllConditioned { .. }) => break,
            Err(e) => return Err(e),
        };
        let ratio = fit.residual_rms / rms;
        if ratio <= 1e-6 {
            return Ok(SelectedOrder {
                order,
                residual_ratio: ratio,
            });
        }
        if best.map_or(true, |b| ratio < b.residual_ratio) {
            best = Some(SelectedOrder {
                order,
                residual_ratio: ratio,
            });
        }
    }
    best.ok_or_else(|| Error::OrderTooHigh {
        order: 1,
        required: 3,
        got: signals.nrows(),
    })
}

/// Greedy nearest-eigenvalue assignment of fitted modes to a reference
/// list. Entry `i` of the result holds the reference index matched to fit
/// mode `i`, or `None` when the mode was dropped. A match is rejected when
/// `|fit - ref| > 0.1 |ref| + 0.05`.
pub fn match_modes_lenient(
    fit_lambdas: &[Complex64],
    reference: &[Complex64],
) -> Vec<Option<usize>> {
    let mut result = vec![None; fit_lambdas.len()];
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (i, f) in fit_lambdas.iter().enumerate() {
        for (j, r) in reference.iter().enumerate() {
            let dist = (f - r).norm();
            if dist <= 0.1 * r.norm() + 0.05 {
                candidates.push((dist, i, j));
            }
        }
    }
    candidates.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut ref_used = vec![false; reference.len()];
    let mut fit_used = vec![false; fit_lambdas.len()];
    for (_, i, j) in candidates {
        if !ref_used[j] && !fit_used[i] {
            result[i] = Some(j);
            ref_used[j] = true;
            fit_used[i] = true;
        }
    }
    result
}

/// As [`match_modes_lenient`], but every reference mode must find a
/// partner.
pub fn match_modes(fit: &PronyFit, reference: &[Complex64]) -> Result<Vec<Option<usize>>> {
    let lambdas = fit.eigenvalues();
    let map = match_modes_lenient(&lambdas, reference);
    for (j, r) in reference.iter().enumerate() {
        if !map.iter().any(|m| *m == Some(j)) {
            return Err(Error::NoMatch {
                lambda: format!("{r}"),
            });
        }
    }
    Ok(map)
}
