//! Synthetic measurement generation: analytic modal responses, fixed-step
//! numerical integration as an independent oracle, noise injection, and
//! batch scenario datasets with reproducible seeding.

use ndarray::{Array1, Array2, ArrayView1};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::linmodel::{LinearSystem, ModalDecomposition};

/// Abort threshold for the integrator.
const BLOW_UP_LIMIT: f64 = 1e12;
/// Relative tolerance on time-step uniformity.
const UNIFORM_STEP_RTOL: f64 = 1e-12;

/// A uniformly sampled response of all states.
#[derive(Debug, Clone)]
pub struct Trajectory {
    times: Vec<f64>,
    states: Array2<f64>,
    scenario_id: String,
}

impl Trajectory {
    /// Build a trajectory, validating the uniform time grid.
    pub fn new(times: Vec<f64>, states: Array2<f64>, scenario_id: impl Into<String>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::DimensionMismatch {
                expected: 2,
                got: times.len(),
                context: "trajectory needs at least two samples".into(),
            });
        }
        if states.nrows() != times.len() {
            return Err(Error::DimensionMismatch {
                expected: times.len(),
                got: states.nrows(),
                context: "state rows vs timestamps".into(),
            });
        }
        let dt = times[1] - times[0];
        if dt <= 0.0 {
            return Err(Error::NonUniformTimes { index: 1 });
        }
        for i in 1..times.len() {
            let step = times[i] - times[i - 1];
            if (step - dt).abs() > UNIFORM_STEP_RTOL * dt.max(1.0) || step <= 0.0 {
                return Err(Error::NonUniformTimes { index: i });
            }
        }
        Ok(Self {
            times,
            states,
            scenario_id: scenario_id.into(),
        })
    }

    pub fn with_scenario_id(mut self, id: impl Into<String>) -> Self {
        self.scenario_id = id.into();
        self
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn states(&self) -> &Array2<f64> {
        &self.states
    }

    /// Initial state; identical to the first sample row.
    pub fn initial_state(&self) -> ArrayView1<'_, f64> {
        self.states.row(0)
    }

    pub fn scenario_id(&self) -> &str {
        &self.scenario_id
    }

    pub fn dt(&self) -> f64 {
        self.times[1] - self.times[0]
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.states.ncols()
    }
}

/// A set of trajectories sharing dimension, labels and sampling step.
#[derive(Debug, Clone)]
pub struct MeasurementSet {
    trajectories: Vec<Trajectory>,
    labels: Vec<String>,
    dt: f64,
}

impl MeasurementSet {
    pub fn new(trajectories: Vec<Trajectory>, labels: Vec<String>) -> Result<Self> {
        let Some(first) = trajectories.first() else {
            return Err(Error::EmptyInput);
        };
        let n = first.dim();
        let dt = first.dt();
        if labels.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: labels.len(),
                context: "measurement labels".into(),
            });
        }
        for t in &trajectories {
            if t.dim() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: t.dim(),
                    context: format!("trajectory {}", t.scenario_id()),
                });
            }
            if (t.dt() - dt).abs() > UNIFORM_STEP_RTOL * dt.max(1.0) {
                return Err(Error::NonUniformTimes { index: 0 });
            }
        }
        Ok(Self {
            trajectories,
            labels,
            dt,
        })
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn dim(&self) -> usize {
        self.labels.len()
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn sample_rate(&self) -> f64 {
        1.0 / self.dt
    }

    /// Root-mean-square of each state over every sample of every trajectory.
    pub fn state_rms(&self) -> Array1<f64> {
        let n = self.dim();
        let mut acc = Array1::<f64>::zeros(n);
        let mut count = 0usize;
        for t in &self.trajectories {
            for row in t.states().rows() {
                for k in 0..n {
                    acc[k] += row[k] * row[k];
                }
                count += 1;
            }
        }
        acc.map(|v| (v / count as f64).sqrt())
    }

    /// Root-mean-square of the state-vector norm over all samples.
    pub fn rms_state_norm(&self) -> f64 {
        let mut acc = 0.0;
        let mut count = 0usize;
        for t in &self.trajectories {
            for row in t.states().rows() {
                acc += row.dot(&row);
                count += 1;
            }
        }
        (acc / count as f64).sqrt()
    }
}

/// Where a set of modal amplitudes came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AmplitudeSource {
    Exact,
    Prony,
}

/// Modal amplitudes `B_ki` of one response: state k by mode i.
#[derive(Debug, Clone)]
pub struct ModalAmplitudes {
    pub source: AmplitudeSource,
    pub values: Array2<Complex64>,
}

/// Exact modal amplitudes `B_ki = (psi_i . x0) phi_ki` of the response from
/// `x0`.
pub fn modal_amplitudes_exact(
    dec: &ModalDecomposition,
    x0: ArrayView1<'_, f64>,
) -> Result<ModalAmplitudes> {
    let n = dec.dim();
    if x0.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: x0.len(),
            context: "initial state".into(),
        });
    }
    let x0c = x0.map(|&v| Complex64::new(v, 0.0));
    let mut values = Array2::<Complex64>::zeros((n, n));
    for i in 0..n {
        let excitation = dec.left_eigenvectors().row(i).dot(&x0c);
        for k in 0..n {
            values[(k, i)] = excitation * dec.right_eigenvectors()[(k, i)];
        }
    }
    Ok(ModalAmplitudes {
        source: AmplitudeSource::Exact,
        values,
    })
}

/// Closed-form response `x_k(t) = sum_i B_ki exp(lambda_i t)` on a uniform
/// time grid. The result is real; a residual imaginary part above 1e-9
/// is reported as an error.
pub fn analytic_response(
    dec: &ModalDecomposition,
    x0: ArrayView1<'_, f64>,
    times: &[f64],
) -> Result<Trajectory> {
    let amps = modal_amplitudes_exact(dec, x0)?;
    let n = dec.dim();
    let mut states = Array2::<f64>::zeros((times.len(), n));
    for (row, &t) in times.iter().enumerate() {
        for k in 0..n {
            let mut acc = Complex64::new(0.0, 0.0);
            for i in 0..n {
                acc += amps.values[(k, i)] * (dec.eigenvalues()[i] * t).exp();
            }
            if acc.im.abs() > 1e-9 {
                return Err(Error::NonFinite {
                    context: format!("imaginary residue {:.3e} in analytic response", acc.im),
                });
            }
            states[(row, k)] = acc.re;
        }
    }
    // Pin the first row to x0 exactly; the modal sum reproduces it only to
    // rounding.
    for k in 0..n {
        states[(0, k)] = x0[k];
    }
    Trajectory::new(times.to_vec(), states, "analytic")
}

/// Fixed-step classic Runge-Kutta integration of `x' = A x`. `samples`
/// counts output rows including the initial state.
pub fn integrate_response(
    sys: &LinearSystem,
    x0: ArrayView1<'_, f64>,
    dt: f64,
    samples: usize,
) -> Result<Trajectory> {
    if dt <= 0.0 {
        return Err(Error::NonUniformTimes { index: 0 });
    }
    if samples < 2 {
        return Err(Error::DimensionMismatch {
            expected: 2,
            got: samples,
            context: "integration samples".into(),
        });
    }
    let n = sys.dim();
    if x0.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: x0.len(),
            context: "initial state".into(),
        });
    }
    let a = sys.state_matrix();
    let mut states = Array2::<f64>::zeros((samples, n));
    let mut x = x0.to_owned();
    states.row_mut(0).assign(&x);
    for step in 1..samples {
        let k1 = a.dot(&x);
        let k2 = a.dot(&(&x + &(&k1 * (dt / 2.0))));
        let k3 = a.dot(&(&x + &(&k2 * (dt / 2.0))));
        let k4 = a.dot(&(&x + &(&k3 * dt)));
        x = &x + &((k1 + k2.mapv(|v| 2.0 * v) + k3.mapv(|v| 2.0 * v) + k4) * (dt / 6.0));
        if x.iter().any(|v| !v.is_finite() || v.abs() > BLOW_UP_LIMIT) {
            return Err(Error::IntegrationBlowUp {
                limit: BLOW_UP_LIMIT,
                step,
            });
        }
        states.row_mut(step).assign(&x);
    }
    let times: Vec<f64> = (0..samples).map(|i| i as f64 * dt).collect();
    Trajectory::new(times, states, "integrated")
}

/// Additive zero-mean Gaussian noise, deterministic in the seed. A zero
/// sigma returns the input unchanged.
pub fn add_noise(traj: &Trajectory, sigma: f64, seed: u64) -> Trajectory {
    if sigma == 0.0 {
        return traj.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("sigma >= 0");
    let mut states = traj.states().clone();
    for v in states.iter_mut() {
        *v += normal.sample(&mut rng);
    }
    Trajectory::new(traj.times().to_vec(), states, traj.scenario_id()).unwrap()
}

/// How scenario initial states are drawn.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialStateSampler {
    /// Uniform in the box `[-half_width, half_width]^N`.
    UniformBox { half_width: f64 },
    /// Vertices of the axis-aligned hyperrectangle with the given half
    /// widths, cycled in binary-counter order.
    HyperrectangleVertices { half_widths: Vec<f64> },
    /// Vertices `E s / 2`, `s` cycling over `{-1, 1}^N`, of the
    /// parallelotope with edge matrix `E` (columns are edges).
    ParallelotopeVertices { edges: Vec<Vec<f64>> },
    /// Explicit list of initial states, cycled.
    Explicit { states: Vec<Vec<f64>> },
}

impl InitialStateSampler {
    /// Initial state for one scenario. Random samplers split their stream
    /// per scenario index, so parallel and serial generation agree.
    pub fn sample(&self, n: usize, scenario_index: usize, seed: u64) -> Result<Array1<f64>> {
        match self {
            InitialStateSampler::UniformBox { half_width } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(scenario_index as u64 + 1);
                Ok(Array1::from_shape_fn(n, |_| {
                    rng.gen_range(-half_width..*half_width)
                }))
            }
            InitialStateSampler::HyperrectangleVertices { half_widths } => {
                if half_widths.len() != n {
                    return Err(Error::DimensionMismatch {
                        expected: n,
                        got: half_widths.len(),
                        context: "hyperrectangle half widths".into(),
                    });
                }
                let pattern = scenario_index % (1usize << n.min(63));
                Ok(Array1::from_shape_fn(n, |k| {
                    if pattern >> k & 1 == 1 {
                        half_widths[k]
                    } else {
                        -half_widths[k]
                    }
                }))
            }
            InitialStateSampler::ParallelotopeVertices { edges } => {
                if edges.len() != n || edges.iter().any(|r| r.len() != n) {
                    return Err(Error::DimensionMismatch {
                        expected: n,
                        got: edges.len(),
                        context: "parallelotope edge matrix".into(),
                    });
                }
                let pattern = scenario_index % (1usize << n.min(63));
                let mut x = Array1::<f64>::zeros(n);
                for (row, er) in edges.iter().enumerate() {
                    for (col, &e) in er.iter().enumerate() {
                        let sign = if pattern >> col & 1 == 1 { 0.5 } else { -0.5 };
                        x[row] += e * sign;
                    }
                }
                Ok(x)
            }
            InitialStateSampler::Explicit { states } => {
                if states.is_empty() {
                    return Err(Error::EmptyInput);
                }
                let row = &states[scenario_index % states.len()];
                if row.len() != n {
                    return Err(Error::DimensionMismatch {
                        expected: n,
                        got: row.len(),
                        context: "explicit initial state".into(),
                    });
                }
                Ok(Array1::from_vec(row.clone()))
            }
        }
    }
}

/// Default sampling step: one hundredth of the fastest oscillation period,
/// or a decade below the fastest decay when no mode oscillates.
pub fn default_dt(dec: &ModalDecomposition) -> f64 {
    let max_im = dec
        .eigenvalues()
        .iter()
        .map(|l| l.im.abs())
        .fold(0.0, f64::max);
    if max_im > 0.0 {
        (std::f64::consts::TAU / max_im) / 100.0
    } else {
        let max_re = dec
            .eigenvalues()
            .iter()
            .map(|l| l.re.abs())
            .fold(0.0, f64::max);
        0.1 / max_re.max(1.0)
    }
}

/// Integrate one trajectory per sampled initial state. Scenario ids are
/// `s000`, `s001`, ... in sample order.
pub fn generate_scenarios(
    sys: &LinearSystem,
    sampler: &InitialStateSampler,
    count: usize,
    duration: f64,
    dt: Option<f64>,
    seed: u64,
) -> Result<MeasurementSet> {
    if count == 0 {
        return Err(Error::EmptyInput);
    }
    let dt = match dt {
        Some(v) => v,
        None => default_dt(&crate::linmodel::modal_decompose(sys)?),
    };
    let samples = (duration / dt).floor() as usize + 1;
    let mut trajectories = Vec::with_capacity(count);
    for idx in 0..count {
        let x0 = sampler.sample(sys.dim(), idx, seed)?;
        let traj =
            integrate_response(sys, x0.view(), dt, samples.max(2))?.with_scenario_id(format!("s{idx:03}"));
        trajectories.push(traj);
    }
    MeasurementSet::new(trajectories, sys.labels().to_vec())
}

// ── Trajectory CSV and manifest I/O ─────────────────────────────────────────

/// Write one trajectory as CSV: header `t,<label1>,...`, one row per sample,
/// shortest round-trip float formatting.
pub fn write_trajectory_csv(traj: &Trajectory, labels: &[String], path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_writer(
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?,
    );
    let mut header = vec!["t".to_string()];
    header.extend(labels.iter().cloned());
    writer
        .write_record(&header)
        .map_err(|e| Error::Parse {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
    for (row, &t) in traj.times().iter().enumerate() {
        let mut record = vec![format!("{t}")];
        for k in 0..traj.dim() {
            record.push(format!("{}", traj.states()[(row, k)]));
        }
        writer.write_record(&record).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
    }
    writer.flush().map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// Read a trajectory CSV written by [`write_trajectory_csv`]. Returns the
/// trajectory and the state labels from the header.
pub fn read_trajectory_csv(path: &Path, scenario_id: &str) -> Result<(Trajectory, Vec<String>)> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    let headers = reader.headers().map_err(|e| Error::Parse {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    let labels: Vec<String> = headers.iter().skip(1).map(|s| s.to_string()).collect();
    let n = labels.len();
    let mut times = Vec::new();
    let mut flat = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        let mut fields = record.iter();
        let t: f64 = fields
            .next()
            .ok_or_else(|| Error::Parse {
                path: path.display().to_string(),
                detail: "empty row".into(),
            })?
            .parse()
            .map_err(|e| Error::Parse {
                path: path.display().to_string(),
                detail: format!("bad time value: {e}"),
            })?;
        times.push(t);
        for field in fields {
            flat.push(field.parse::<f64>().map_err(|e| Error::Parse {
                path: path.display().to_string(),
                detail: format!("bad state value: {e}"),
            })?);
        }
    }
    let rows = times.len();
    let states = Array2::from_shape_vec((rows, n), flat).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    Ok((Trajectory::new(times, states, scenario_id)?, labels))
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestDoc {
    dt: f64,
    labels: Vec<String>,
    trajectories: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    scenario_id: String,
    path: String,
}

/// Write all trajectories as CSVs plus a `manifest.json` into `dir`.
/// Returns the manifest path.
pub fn write_manifest(ms: &MeasurementSet, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut entries = Vec::with_capacity(ms.trajectories().len());
    for traj in ms.trajectories() {
        let file = format!("{}.csv", traj.scenario_id());
        write_trajectory_csv(traj, ms.labels(), &dir.join(&file))?;
        entries.push(ManifestEntry {
            scenario_id: traj.scenario_id().to_string(),
            path: file,
        });
    }
    let doc = ManifestDoc {
        dt: ms.dt(),
        labels: ms.labels().to_vec(),
        trajectories: entries,
    };
    let manifest = dir.join("manifest.json");
    let mut f = std::fs::File::create(&manifest)
        .map_err(|e| Error::io(manifest.display().to_string(), e))?;
    let text = serde_json::to_string_pretty(&doc).expect("manifest serializes");
    f.write_all(text.as_bytes())
        .map_err(|e| Error::io(manifest.display().to_string(), e))?;
    Ok(manifest)
}

/// Load a measurement set from a manifest written by [`write_manifest`].
pub fn read_manifest(manifest: &Path) -> Result<MeasurementSet> {
    let text = std::fs::read_to_string(manifest)
        .map_err(|e| Error::io(manifest.display().to_string(), e))?;
    let doc: ManifestDoc = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: manifest.display().to_string(),
        detail: e.to_string(),
    })?;
    let base = manifest.parent().unwrap_or_else(|| Path::new("."));
    let mut trajectories = Vec::with_capacity(doc.trajectories.len());
    for entry in &doc.trajectories {
        let (traj, labels) = read_trajectory_csv(&base.join(&entry.path), &entry.scenario_id)?;
        if labels != doc.labels {
            return Err(Error::Parse {
                path: entry.path.clone(),
                detail: "CSV labels disagree with manifest".into(),
            });
        }
        trajectories.push(traj);
    }
    MeasurementSet::new(trajectories, doc.labels)
}
