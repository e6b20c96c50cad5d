use mpf_core::linmodel::*;
use mpf_core::prony::*;
use mpf_core::simgen::*;
use ndarray::{Array1, Array2};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn seeded_stable_system(n: usize, seed: u64) -> LinearSystem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let a = Array2::from_shape_fn((n, n), |_| rng.gen_range(-1.0..1.0));
        let sys = LinearSystem::with_default_labels(a.clone()).unwrap();
        let Ok(dec) = modal_decompose(&sys) else { continue; };
        let max_re = dec.eigenvalues().iter().map(|l| l.re).fold(f64::NEG_INFINITY, f64::max);
        let mut shifted = a;
        for i in 0..n { shifted[(i, i)] -= max_re + 0.05; }
        let sys = LinearSystem::with_default_labels(shifted).unwrap();
        if modal_decompose(&sys).is_ok() { return sys; }
    }
}

fn lightly_damped_variant(sys: &LinearSystem) -> LinearSystem {
    let dec = modal_decompose(sys).unwrap();
    let n = dec.dim();
    let phi = dec.right_eigenvectors();
    let psi = dec.left_eigenvectors();
    let mut a = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let mut acc = Complex64::new(0.0, 0.0);
            for m in 0..n {
                let lam = dec.eigenvalues()[m];
                let clamped = Complex64::new(lam.re.clamp(-0.25, -0.05), lam.im);
                acc += phi[(i, m)] * clamped * psi[(m, j)];
            }
            a[(i, j)] = acc.re;
        }
    }
    LinearSystem::with_default_labels(a).unwrap()
}

fn main() {
    for trial in 0..50u64 {
        let sys = lightly_damped_variant(&seeded_stable_system(4, 0xAC60 + trial));
        let dec = modal_decompose(&sys).unwrap();
        let max_im = dec.eigenvalues().iter().map(|l| l.im.abs()).fold(0.0f64, f64::max);
        let min_im = dec.eigenvalues().iter().map(|l| l.im.abs()).filter(|v| *v > 0.0).fold(f64::INFINITY, f64::min);
        let dt = if max_im > 0.0 { (std::f64::consts::TAU / max_im) / 24.0 } else { 0.2 };
        let slow = if min_im.is_finite() { std::f64::consts::TAU / min_im } else { 10.0 };
        let samples = ((4.5 * slow / dt).ceil() as usize).clamp(240, 640);
        let x0 = Array1::from_shape_fn(4, |k| 0.5 - 0.13 * k as f64);
        let times: Vec<f64> = (0..samples).map(|i| i as f64 * dt).collect();
        let traj = analytic_response(&dec, x0.view(), &times).unwrap();
        let mut line = format!("trial {trial:2} evals={:?} dt={dt:.3} samples={samples}: ",
            dec.eigenvalues().iter().map(|l| format!("{:.2}", l)).collect::<Vec<_>>());
        for order in 1..=4usize {
            match fit_prony(traj.states().view(), dt, order) {
                Ok(f) => line.push_str(&format!("o{order}: r={:.1e}  ", f.residual_rms)),
                Err(e) => line.push_str(&format!("o{order}: ERR({})  ", match e {
                    mpf_core::Error::IllConditioned { cond, .. } => format!("cond {cond:.1e}"),
                    other => other.to_string(),
                })),
            }
        }
        match select_order(traj.states().view(), dt, 4) {
            Ok(s) => line.push_str(&format!("-> sel {}", s.order)),
            Err(e) => line.push_str(&format!("-> sel ERR {e}")),
        }
        if trial < 12 { println!("{line}"); }
    }
}
