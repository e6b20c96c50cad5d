//! Small shared linear-algebra helpers on top of the LAPACK backend.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use ndarray_linalg::{SVDInto, SVD};
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Relative singular-value truncation applied in least-squares solves.
pub(crate) const SV_TRUNCATION: f64 = 1e-12;

/// Condition-number ceiling beyond which fit systems are rejected.
pub(crate) const COND_LIMIT: f64 = 1e12;

/// 2-norm condition number of a real matrix (sigma_max / sigma_min).
pub(crate) fn cond2(a: &Array2<f64>) -> Result<f64> {
    let (_, s, _) = a.svd(false, false)?;
    let smax = s.iter().cloned().fold(0.0, f64::max);
    let smin = s.iter().cloned().fold(f64::INFINITY, f64::min);
    if smin <= 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(smax / smin)
}

/// Smallest singular value of a real matrix.
pub(crate) fn smallest_singular_value(a: &Array2<f64>) -> Result<f64> {
    let (_, s, _) = a.svd(false, false)?;
    Ok(s.iter().cloned().fold(f64::INFINITY, f64::min))
}

/// Least-squares solve of a real overdetermined system via SVD with
/// truncation at [`SV_TRUNCATION`]. Returns the solution and cond2(a).
pub(crate) fn svd_solve_real(
    a: &Array2<f64>,
    b: ArrayView1<'_, f64>,
    system: &str,
) -> Result<(Array1<f64>, f64)> {
    let (u, s, vt) = a
        .clone()
        .svd_into(true, true)
        .map_err(Error::from)
        .map(|(u, s, vt)| (u.unwrap(), s, vt.unwrap()))?;
    let smax = s.iter().cloned().fold(0.0, f64::max);
    let smin = s.iter().cloned().fold(f64::INFINITY, f64::min);
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if cond > COND_LIMIT {
        return Err(Error::IllConditioned {
            system: system.to_string(),
            cond,
            bound: COND_LIMIT,
        });
    }
    let rank = s.len();
    // x = V diag(1/s) U^T b, with tiny singular values zeroed.
    let utb = u.t().slice(ndarray::s![..rank, ..]).dot(&b);
    let mut scaled = Array1::<f64>::zeros(rank);
    for i in 0..rank {
        if s[i] > SV_TRUNCATION * smax {
            scaled[i] = utb[i] / s[i];
        }
    }
    let x = vt.slice(ndarray::s![..rank, ..]).t().dot(&scaled);
    Ok((x, cond))
}

/// Least-squares solve of a complex system with multiple right-hand sides,
/// same truncation policy as the real variant.
pub(crate) fn svd_solve_complex(
    a: &Array2<Complex64>,
    b: ArrayView2<'_, Complex64>,
    system: &str,
) -> Result<(Array2<Complex64>, f64)> {
    let (u, s, vh) = a
        .clone()
        .svd_into(true, true)
        .map_err(Error::from)
        .map(|(u, s, vh)| (u.unwrap(), s, vh.unwrap()))?;
    let smax = s.iter().cloned().fold(0.0, f64::max);
    let smin = s.iter().cloned().fold(f64::INFINITY, f64::min);
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if cond > COND_LIMIT {
        return Err(Error::IllConditioned {
            system: system.to_string(),
            cond,
            bound: COND_LIMIT,
        });
    }
    let rank = s.len();
    let uh_b = u
        .t()
        .slice(ndarray::s![..rank, ..])
        .map(|z| z.conj())
        .dot(&b);
    let mut scaled = Array2::<Complex64>::zeros((rank, b.ncols()));
    for i in 0..rank {
        if s[i] > SV_TRUNCATION * smax {
            for j in 0..b.ncols() {
                scaled[(i, j)] = uh_b[(i, j)] / s[i];
            }
        }
    }
    let x = vh
        .slice(ndarray::s![..rank, ..])
        .t()
        .map(|z| z.conj())
        .dot(&scaled);
    Ok((x, cond))
}

/// Deterministic mode ordering: descending |Im|, ties by descending Re,
/// remaining ties by original index. Returns the permutation.
pub(crate) fn mode_order(eigenvalues: &[Complex64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..eigenvalues.len()).collect();
    idx.sort_by(|&a, &b| {
        let (la, lb) = (eigenvalues[a], eigenvalues[b]);
        lb.im
            .abs()
            .partial_cmp(&la.im.abs())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(
                lb.re
                    .partial_cmp(&la.re)
                    .unwrap_or(std::cmp::Ordering::Equal),
            )
            .then(a.cmp(&b))
    });
    idx
}

/// Conjugate-partner map for an eigenvalue list: entry i holds the index of
/// the eigenvalue closest to conj(lambda_i), or i itself for real modes.
pub(crate) fn conjugate_partners(eigenvalues: &[Complex64], rel_tol: f64) -> Vec<usize> {
    let n = eigenvalues.len();
    let mut partners = vec![0usize; n];
    for i in 0..n {
        let li = eigenvalues[i];
        if li.im.abs() <= rel_tol * (1.0 + li.norm()) {
            partners[i] = i;
            continue;
        }
        let target = li.conj();
        let mut best = i;
        let mut best_dist = f64::INFINITY;
        for (j, lj) in eigenvalues.iter().enumerate() {
            if j == i {
                continue;
            }
            let d = (lj - target).norm();
            if d < best_dist {
                best_dist = d;
                best = j;
            }
        }
        partners[i] = best;
    }
    partners
}
