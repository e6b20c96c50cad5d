//! Model-based modal analysis of a linear system `x' = A x`.
//!
//! This module is the ground-truth side of the crate: eigendecomposition of
//! the state matrix with a fixed eigenvector normalization, and the
//! participation factor matrix
//!
//! ```text
//! p_ki = psi_ik * phi_ki          (elementwise)
//! P    = Phi o Psi^T              (Hadamard form)
//! ```
//!
//! where `phi_i` are right-eigenvector columns, `psi_i` left-eigenvector
//! rows, normalized so that `psi_i phi_i = 1`. Under that normalization each
//! participation column sums to exactly one.

use ndarray::{Array1, Array2};
use ndarray_linalg::{Eig, Inverse, SVD};
use num_complex::Complex64;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::linalg::{conjugate_partners, mode_order};

/// Relative proximity at which two eigenvalues count as coincident.
const EIGENVALUE_COINCIDENCE_RTOL: f64 = 1e-8;
/// Relative smallest-singular-value floor below which the eigenvector
/// matrix counts as singular.
const EIGENVECTOR_SINGULAR_RTOL: f64 = 1e-12;

/// A linear autonomous system `x' = A x` with labelled states.
#[derive(Debug, Clone)]
pub struct LinearSystem {
    a: Array2<f64>,
    labels: Vec<String>,
}

#[derive(Deserialize)]
struct LinearSystemDoc {
    labels: Vec<String>,
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
}

impl LinearSystem {
    /// Build a system from a square state matrix and one label per state.
    pub fn new(a: Array2<f64>, labels: Vec<String>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: a.ncols(),
                context: "state matrix must be square".into(),
            });
        }
        if n == 0 {
            return Err(Error::DimensionMismatch {
                expected: 1,
                got: 0,
                context: "state matrix must be non-empty".into(),
            });
        }
        if !a.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: "state matrix".into(),
            });
        }
        if labels.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: labels.len(),
                context: "state labels".into(),
            });
        }
        for (i, li) in labels.iter().enumerate() {
            if labels[..i].contains(li) {
                return Err(Error::Parse {
                    path: "<labels>".into(),
                    detail: format!("duplicate state label {li:?}"),
                });
            }
        }
        Ok(Self { a, labels })
    }

    /// Convenience constructor with generated labels `x1..xN`.
    pub fn with_default_labels(a: Array2<f64>) -> Result<Self> {
        let labels = (1..=a.nrows()).map(|i| format!("x{i}")).collect();
        Self::new(a, labels)
    }

    /// Parse the JSON document `{"labels": [...], "A": [[...], ...]}`.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let doc: LinearSystemDoc = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: "<json>".into(),
            detail: e.to_string(),
        })?;
        let n = doc.a.len();
        let mut a = Array2::<f64>::zeros((n, n.max(1)));
        for (i, row) in doc.a.iter().enumerate() {
            if row.len() != n {
                return Err(Error::Parse {
                    path: "<json>".into(),
                    detail: format!("row {i} has {} entries, expected {n}", row.len()),
                });
            }
            for (j, v) in row.iter().enumerate() {
                a[(i, j)] = *v;
            }
        }
        Self::new(a, doc.labels)
    }

    /// Load a system from a JSON file.
    pub fn from_json_file(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_json_str(&text).map_err(|e| match e {
            Error::Parse { detail, .. } => Error::Parse {
                path: path.display().to_string(),
                detail,
            },
            other => other,
        })
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn state_matrix(&self) -> &Array2<f64> {
        &self.a
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

/// Eigenstructure of a [`LinearSystem`] under the `psi_i phi_i = 1`
/// normalization, with the extra convention that the largest-magnitude
/// entry of each right eigenvector is real and positive.
#[derive(Debug, Clone)]
pub struct ModalDecomposition {
    eigenvalues: Vec<Complex64>,
    right: Array2<Complex64>,
    left: Array2<Complex64>,
    mode_pairs: Vec<usize>,
}

impl ModalDecomposition {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Eigenvalues in the crate's deterministic order (descending |Im|,
    /// then descending Re, then input index).
    pub fn eigenvalues(&self) -> &[Complex64] {
        &self.eigenvalues
    }

    /// Right eigenvectors as matrix columns.
    pub fn right_eigenvectors(&self) -> &Array2<Complex64> {
        &self.right
    }

    /// Left eigenvectors as matrix rows; equals the inverse of the right
    /// eigenvector matrix.
    pub fn left_eigenvectors(&self) -> &Array2<Complex64> {
        &self.left
    }

    /// Index of the conjugate partner of each mode (itself for real modes).
    pub fn mode_pairs(&self) -> &[usize] {
        &self.mode_pairs
    }

    /// Oscillation frequency in Hz per mode: |Im lambda| / 2 pi.
    pub fn frequencies_hz(&self) -> Vec<f64> {
        self.eigenvalues
            .iter()
            .map(|l| l.im.abs() / std::f64::consts::TAU)
            .collect()
    }

    /// Modes with positive imaginary part, one representative per
    /// oscillatory conjugate pair.
    pub fn oscillatory_representatives(&self) -> Vec<usize> {
        (0..self.dim())
            .filter(|&i| self.eigenvalues[i].im > 0.0)
            .collect()
    }
}

/// Participation factor matrix: entry (k, i) is the participation of state
/// k in mode i.
#[derive(Debug, Clone)]
pub struct PFMatrix {
    values: Array2<Complex64>,
    mode_frequencies: Vec<f64>,
}

impl PFMatrix {
    pub fn values(&self) -> &Array2<Complex64> {
        &self.values
    }

    /// Magnitudes |p_ki|.
    pub fn magnitudes(&self) -> Array2<f64> {
        self.values.map(|p| p.norm())
    }

    /// Frequency in Hz of each mode column.
    pub fn mode_frequencies(&self) -> &[f64] {
        &self.mode_frequencies
    }

    pub fn dim(&self) -> usize {
        self.values.nrows()
    }
}

/// Eigendecomposition with deterministic ordering and the crate's
/// normalization.
pub fn modal_decompose(sys: &LinearSystem) -> Result<ModalDecomposition> {
    let a = sys.state_matrix();
    if !a.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite {
            context: "state matrix".into(),
        });
    }
    let (raw_values, raw_vectors) = a.eig()?;
    let order = mode_order(raw_values.as_slice().unwrap());
    let n = sys.dim();

    let mut eigenvalues = Vec::with_capacity(n);
    let mut right = Array2::<Complex64>::zeros((n, n));
    for (col, &src) in order.iter().enumerate() {
        eigenvalues.push(raw_values[src]);
        for k in 0..n {
            right[(k, col)] = raw_vectors[(k, src)];
        }
    }

    check_defectiveness(&eigenvalues, &right)?;

    // Phase convention: rotate each column so its largest-magnitude entry
    // is real positive; columns keep their unit Euclidean norm.
    for i in 0..n {
        let mut pivot = 0usize;
        let mut best = -1.0;
        for k in 0..n {
            let m = right[(k, i)].norm();
            if m > best {
                best = m;
                pivot = k;
            }
        }
        if best > 0.0 {
            let rot = right[(pivot, i)].conj() / best;
            for k in 0..n {
                right[(k, i)] *= rot;
            }
        }
    }

    // Force exact conjugacy across oscillatory pairs: copy the +Im member
    // into its partner. The phase convention above makes the pair agree up
    // to rounding, so this only removes last-bit asymmetry.
    let mode_pairs = conjugate_partners(&eigenvalues, 1e-12);
    for i in 0..n {
        let j = mode_pairs[i];
        if j != i && eigenvalues[i].im > 0.0 {
            eigenvalues[j] = eigenvalues[i].conj();
            for k in 0..n {
                right[(k, j)] = right[(k, i)].conj();
            }
        }
    }

    let left = right.inv().map_err(|_| Error::DefectiveMatrix {
        lambda_a: format!("{}", eigenvalues[0]),
        lambda_b: format!("{}", eigenvalues[0]),
    })?;

    Ok(ModalDecomposition {
        eigenvalues,
        right,
        left,
        mode_pairs,
    })
}

fn check_defectiveness(eigenvalues: &[Complex64], right: &Array2<Complex64>) -> Result<()> {
    let n = eigenvalues.len();
    let mut coincident: Option<(usize, usize)> = None;
    'outer: for i in 0..n {
        for j in (i + 1)..n {
            let scale = eigenvalues[i].norm().max(eigenvalues[j].norm()).max(1e-30);
            if (eigenvalues[i] - eigenvalues[j]).norm() <= EIGENVALUE_COINCIDENCE_RTOL * scale {
                coincident = Some((i, j));
                break 'outer;
            }
        }
    }
    let Some((i, j)) = coincident else {
        return Ok(());
    };
    // Coincident eigenvalues are fine as long as the eigenbasis is complete.
    let (_, s, _) = right.svd(false, false)?;
    let smax = s.iter().cloned().fold(0.0, f64::max);
    let smin = s.iter().cloned().fold(f64::INFINITY, f64::min);
    if smin <= EIGENVECTOR_SINGULAR_RTOL * smax.max(1.0) {
        return Err(Error::DefectiveMatrix {
            lambda_a: format!("{}", eigenvalues[i]),
            lambda_b: format!("{}", eigenvalues[j]),
        });
    }
    Ok(())
}

/// Participation factor matrix from a normalized decomposition.
pub fn participation_matrix(dec: &ModalDecomposition) -> PFMatrix {
    let n = dec.dim();
    let mut values = Array2::<Complex64>::zeros((n, n));
    for k in 0..n {
        for i in 0..n {
            values[(k, i)] = dec.left[(i, k)] * dec.right[(k, i)];
        }
    }
    PFMatrix {
        values,
        mode_frequencies: dec.frequencies_hz(),
    }
}

/// The Hadamard form `Phi o Psi^T`; equal to [`participation_matrix`] and
/// kept as a distinct computation route for cross-checking.
pub fn participation_matrix_hadamard(dec: &ModalDecomposition) -> Array2<Complex64> {
    let psi_t = dec.left.t();
    let mut out = dec.right.clone();
    out.zip_mut_with(&psi_t, |phi, psi| *phi *= *psi);
    out
}

/// Column magnitudes scaled so the largest entry is exactly 1.0.
pub fn normalize_pf_column(pf: &PFMatrix, mode: usize) -> Result<Array1<f64>> {
    let col = pf.values.column(mode);
    let mags: Array1<f64> = col.map(|p| p.norm());
    let max = mags.iter().cloned().fold(0.0, f64::max);
    if max < 1e-14 {
        return Err(Error::ZeroColumn {
            column: mode,
            floor: 1e-14,
        });
    }
    Ok(mags.map(|m| m / max))
}
