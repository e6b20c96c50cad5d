//! Shared builders for the integration and acceptance suites: seeded
//! stable systems, parallelotope vertex datasets, and comparison helpers.

use mpf_core::estimator::{EstimatorConfig, ModeEstimate, PFReport};
use mpf_core::linmodel::{
    modal_decompose, normalize_pf_column, LinearSystem, ModalDecomposition, PFMatrix,
};
use mpf_core::simgen::{analytic_response, MeasurementSet};
use mpf_core::symmetry::SymmetryConfig;
use ndarray::{Array1, Array2};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random stable system: entries from U(-1, 1), spectrum shifted left so
/// every eigenvalue has real part at most -0.05.
pub fn seeded_stable_system(n: usize, seed: u64) -> LinearSystem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let a = Array2::from_shape_fn((n, n), |_| rng.gen_range(-1.0..1.0));
        let sys = LinearSystem::with_default_labels(a.clone()).unwrap();
        let Ok(dec) = modal_decompose(&sys) else {
            continue;
        };
        let max_re = dec
            .eigenvalues()
            .iter()
            .map(|l| l.re)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut shifted = a;
        for i in 0..n {
            shifted[(i, i)] -= max_re + 0.05;
        }
        let sys = LinearSystem::with_default_labels(shifted).unwrap();
        if modal_decompose(&sys).is_ok() {
            return sys;
        }
    }
}

/// Condition number of a real matrix via singular values.
pub fn cond2(m: &Array2<f64>) -> f64 {
    use ndarray_linalg::SVD;
    let (_, s, _) = m.svd(false, false).unwrap();
    s.iter().cloned().fold(0.0, f64::max) / s.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Random parallelotope edge matrix with condition number below sqrt(2),
/// the regime where edge recovery from vertex samples is well posed.
pub fn crisp_edges(n: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let m: Array2<f64> = Array2::from_shape_fn((n, n), |(i, j)| {
            let base = if i == j { 1.0 } else { 0.0 };
            base + rng.gen_range(-0.12..0.12)
        });
        let scale = rng.gen_range(0.5..1.5);
        let m = m.mapv(|v| v * scale);
        if cond2(&m) <= 1.35 {
            return m;
        }
    }
}

/// All 2^n vertices of the mirrored parallelotope with the given edge
/// matrix, in binary-counter order.
pub fn parallelotope_vertices(edges: &Array2<f64>) -> Vec<Array1<f64>> {
    let n = edges.nrows();
    let half = Array1::from_elem(n, 0.5);
    (0..(1usize << n))
        .map(|mask| {
            let a = Array1::from_shape_fn(n, |k| if mask >> k & 1 == 1 { 1.0 } else { 0.0 });
            edges.dot(&(&a - &half))
        })
        .collect()
}

/// Noiseless dataset whose segments start exactly at the mirrored
/// parallelotope vertices, duplicated at 1x and 3x scale so that even in
/// two dimensions enough disjoint vertex pairs exist. Returns the set and
/// the pair target covering exactly the vertex pairs.
pub fn vertex_dataset(
    dec: &ModalDecomposition,
    edges: &Array2<f64>,
    dt: f64,
    samples: usize,
) -> (MeasurementSet, usize) {
    vertex_dataset_perturbed(dec, edges, dt, samples, 0.0, 0)
}

/// As [`vertex_dataset`], with every vertex displaced by `level` times the
/// per-state RMS of the vertex set, in a seeded random direction.
pub fn vertex_dataset_perturbed(
    dec: &ModalDecomposition,
    edges: &Array2<f64>,
    dt: f64,
    samples: usize,
    level: f64,
    seed: u64,
) -> (MeasurementSet, usize) {
    let n = dec.dim();
    let times: Vec<f64> = (0..samples).map(|i| i as f64 * dt).collect();
    let mut starts = Vec::new();
    for scale in [1.0, 3.0] {
        for v in parallelotope_vertices(edges) {
            starts.push(v.mapv(|x| x * scale));
        }
    }
    let state_rms = {
        let mut acc = Array1::<f64>::zeros(n);
        for s in &starts {
            for k in 0..n {
                acc[k] += s[k] * s[k];
            }
        }
        acc.mapv(|v| (v / starts.len() as f64).sqrt())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trajectories = Vec::new();
    for (idx, start) in starts.iter().enumerate() {
        let mut x0 = start.clone();
        if level > 0.0 {
            for k in 0..n {
                x0[k] += level * state_rms[k] * rng.gen_range(-1.0..1.0);
            }
        }
        trajectories.push(
            analytic_response(dec, x0.view(), &times)
                .unwrap()
                .with_scenario_id(format!("v{idx:03}")),
        );
    }
    let labels = (0..n).map(|k| format!("x{}", k + 1)).collect();
    let ms = MeasurementSet::new(trajectories, labels).unwrap();
    (ms, 1usize << n)
}

/// Pipeline configuration for the designed-start datasets: the candidate
/// stride exceeds any trajectory length, so pair selection sees exactly
/// the designed initial states.
pub fn exact_pipeline_cfg(pair_target: usize, window: usize) -> EstimatorConfig {
    EstimatorConfig {
        symmetry: SymmetryConfig {
            r_threshold: Some(1e-3),
            candidate_stride: 1_000_000,
            ..Default::default()
        },
        target_pairs: Some(pair_target),
        window: Some(window),
        ..Default::default()
    }
}

/// Same eigenvectors (hence the same participation factors), but with
/// the real parts affinely rescaled into [-0.25, -0.05] so responses ring
/// instead of dying out. The map is monotone, so distinct eigenvalues stay
/// distinct.
pub fn lightly_damped_variant(sys: &LinearSystem) -> LinearSystem {
    let dec = modal_decompose(sys).unwrap();
    let n = dec.dim();
    let re_min = dec
        .eigenvalues()
        .iter()
        .map(|l| l.re)
        .fold(f64::INFINITY, f64::min);
    let re_max = dec
        .eigenvalues()
        .iter()
        .map(|l| l.re)
        .fold(f64::NEG_INFINITY, f64::max);
    let rescale = |re: f64| {
        if re_max - re_min < 1e-12 {
            -0.15
        } else {
            -0.05 + (re - re_max) / (re_min - re_max) * (-0.25 + 0.05)
        }
    };
    let phi = dec.right_eigenvectors();
    let psi = dec.left_eigenvectors();
    let mut a = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let mut acc = Complex64::new(0.0, 0.0);
            for m in 0..n {
                let lam = dec.eigenvalues()[m];
                let moved = Complex64::new(rescale(lam.re), lam.im);
                acc += phi[(i, m)] * moved * psi[(m, j)];
            }
            a[(i, j)] = acc.re;
        }
    }
    LinearSystem::with_default_labels(a).unwrap()
}

/// Fully coupled spring network of oscillators with seeded parameters:
/// `pairs` oscillatory mode pairs, light damping, distinct frequencies,
/// and participation spread over every state (no near-zero factors that
/// would make ratio-based error indices meaningless).
pub fn seeded_oscillator_chain(pairs: usize, seed: u64) -> LinearSystem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 2 * pairs;
    let omegas: Vec<f64> = (0..pairs)
        .map(|i| 1.0 + 0.55 * i as f64 + rng.gen_range(-0.10..0.10))
        .collect();
    let mut kappa = Array2::<f64>::zeros((pairs, pairs));
    for i in 0..pairs {
        for j in (i + 1)..pairs {
            let k = rng.gen_range(0.25..0.5);
            kappa[(i, j)] = k;
            kappa[(j, i)] = k;
        }
    }
    let dampings: Vec<f64> = (0..pairs).map(|_| rng.gen_range(0.05..0.12)).collect();
    let mut a = Array2::<f64>::zeros((n, n));
    for i in 0..pairs {
        let (row_x, row_v) = (2 * i, 2 * i + 1);
        a[(row_x, row_v)] = 1.0;
        let mut stiffness = omegas[i] * omegas[i];
        for j in 0..pairs {
            if j != i {
                stiffness += kappa[(i, j)];
                a[(row_v, 2 * j)] = kappa[(i, j)];
            }
        }
        a[(row_v, row_x)] = -stiffness;
        a[(row_v, row_v)] = -dampings[i];
    }
    LinearSystem::with_default_labels(a).unwrap()
}

/// Sampling step and sample count adapted to the system's mode content:
/// roughly 24 samples per fastest oscillation period and 4.5 periods of
/// the slowest, so Prony poles sit at healthy angles on the unit circle.
pub fn dataset_timing(dec: &ModalDecomposition) -> (f64, usize) {
    let max_im = dec
        .eigenvalues()
        .iter()
        .map(|l| l.im.abs())
        .fold(0.0f64, f64::max);
    if max_im == 0.0 {
        let max_re = dec
            .eigenvalues()
            .iter()
            .map(|l| l.re.abs())
            .fold(1.0f64, f64::max);
        return (0.2 / max_re, 400);
    }
    let min_im = dec
        .eigenvalues()
        .iter()
        .map(|l| l.im.abs())
        .filter(|v| *v > 0.0)
        .fold(f64::INFINITY, f64::min);
    let dt = (std::f64::consts::TAU / max_im) / 24.0;
    let slow_period = std::f64::consts::TAU / min_im;
    let samples = ((4.5 * slow_period / dt).ceil() as usize).clamp(240, 640);
    (dt, samples)
}

/// Index of the model mode nearest to the reported one.
pub fn match_model_mode(dec: &ModalDecomposition, mode: &ModeEstimate) -> usize {
    let lambda = mode.lambda_c();
    dec.eigenvalues()
        .iter()
        .enumerate()
        .map(|(i, l)| (i, (l - lambda).norm()))
        .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap()
}

/// Worst |e2| in percent over all state pairs and all reported modes,
/// comparing against the model participation factors.
pub fn max_abs_e2(dec: &ModalDecomposition, pf: &PFMatrix, report: &PFReport) -> f64 {
    let mut worst = 0.0f64;
    for mode in &report.modes {
        let model_idx = match_model_mode(dec, mode);
        let model_col = normalize_pf_column(pf, model_idx).unwrap();
        let n = model_col.len();
        for i in 0..n {
            for j in (i + 1)..n {
                let (Some(mi), Some(mj)) = (mode.normalized[i], mode.normalized[j]) else {
                    continue;
                };
                if model_col[i] <= 0.0 || model_col[j] <= 0.0 || mi <= 0.0 || mj <= 0.0 {
                    continue;
                }
                let e2 = ((model_col[j] / model_col[i]) / (mj / mi) - 1.0) * 100.0;
                worst = worst.max(e2.abs());
            }
        }
    }
    worst
}

/// Complex helper for shape assembly in tests.
pub fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}
