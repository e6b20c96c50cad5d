//! JSON run configuration: strict parsing (unknown keys rejected),
//! default resolution, and the resolved-config echo written next to every
//! result.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use mpf_core::estimator::{EstimatorConfig, FrequencyTarget, TrackedModes};
use mpf_core::simgen::InitialStateSampler;
use mpf_core::symmetry::{NormSpec, SymmetryConfig};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Path to the LinearSystem JSON document.
    pub system: Option<PathBuf>,
    pub dataset: Option<DatasetBlock>,
    #[serde(default)]
    pub symmetry: SymmetryBlock,
    #[serde(default)]
    pub transform: TransformBlock,
    #[serde(default)]
    pub prony: PronyBlock,
    #[serde(default)]
    pub estimator: EstimatorBlock,
    pub compare: Option<CompareBlock>,
    #[serde(default)]
    pub output: OutputBlock,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetBlock {
    /// Existing dataset: path to a manifest written by `simulate`.
    pub manifest: Option<PathBuf>,
    /// Synthetic dataset specification.
    pub generate: Option<GenerateBlock>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateBlock {
    pub count: usize,
    pub duration: f64,
    pub dt: Option<f64>,
    pub sampler: InitialStateSampler,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SymmetryBlock {
    pub r_threshold: Option<f64>,
    pub norm: Option<NormBlock>,
    pub max_pair_residual: Option<f64>,
    pub candidate_stride: Option<usize>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub struct NormBlock {
    pub kind: NormKind,
    pub weights: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Euclidean,
    Weighted,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct TransformBlock {
    pub cond_bound: Option<f64>,
}

impl Default for TransformBlock {
    fn default() -> Self {
        Self { cond_bound: None }
    }
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct PronyBlock {
    /// Model order: a number, or "auto".
    pub order: Option<OrderSpec>,
    /// Segment fit window in samples.
    pub window: Option<usize>,
    /// Cap for automatic order selection.
    pub max_order: Option<usize>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(untagged)]
pub enum OrderSpec {
    Auto(String),
    Fixed(usize),
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorBlock {
    #[serde(default)]
    pub mode: EstimatorMode,
    /// Tracked modes as [hz, tolerance_hz] pairs.
    pub tracked_hz: Option<Vec<(f64, f64)>>,
    /// Coordinate groups for the sub-space strategy.
    pub groups: Option<Vec<Vec<usize>>>,
    pub target_pairs: Option<usize>,
    /// Prior full-run report supplying the transformation and z-space
    /// shapes for the partial path.
    pub shapes_from_report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorMode {
    #[default]
    Full,
    Partial,
    Subspace,
    Blackbox,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct CompareBlock {
    /// Report produced by a prior `estimate` run.
    pub report: PathBuf,
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    pub dir: Option<PathBuf>,
    pub formats: Option<Vec<String>>,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("config {}: {e}", path.display()))
    }
}

/// Fully resolved configuration, echoed next to every result so runs are
/// reproducible from their outputs alone.
#[derive(Debug, Clone, Serialize)]
pub struct ResolvedConfig {
    pub system: Option<PathBuf>,
    pub dataset_manifest: Option<PathBuf>,
    pub dataset_generate: Option<GenerateBlock>,
    pub symmetry: SymmetryConfig,
    pub cond_bound: f64,
    pub prony_order: Option<usize>,
    pub prony_window: Option<usize>,
    pub prony_max_order: Option<usize>,
    pub estimator_mode: EstimatorMode,
    pub tracked_hz: Option<Vec<(f64, f64)>>,
    pub groups: Option<Vec<Vec<usize>>>,
    pub target_pairs: Option<usize>,
    pub shapes_from_report: Option<PathBuf>,
    pub compare_report: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub formats: Vec<String>,
}

impl ResolvedConfig {
    pub fn resolve(cfg: &RunConfig, out_override: Option<&Path>, seed_override: Option<u64>) -> Result<Self, String> {
        let symmetry = SymmetryConfig {
            r_threshold: cfg.symmetry.r_threshold,
            norm: match &cfg.symmetry.norm {
                None => NormSpec::Euclidean,
                Some(block) => match block.kind {
                    NormKind::Euclidean => NormSpec::Euclidean,
                    NormKind::Weighted => NormSpec::Weighted {
                        weights: block.weights.clone(),
                    },
                },
            },
            max_pair_residual: cfg.symmetry.max_pair_residual.unwrap_or(f64::INFINITY),
            candidate_stride: cfg.symmetry.candidate_stride.unwrap_or(1),
        };
        let prony_order = match &cfg.prony.order {
            None => None,
            Some(OrderSpec::Fixed(n)) => Some(*n),
            Some(OrderSpec::Auto(word)) if word == "auto" => None,
            Some(OrderSpec::Auto(word)) => {
                return Err(format!("prony.order must be a number or \"auto\", got {word:?}"))
            }
        };
        let mut generate = cfg.dataset.as_ref().and_then(|d| d.generate.clone());
        if let (Some(gen), Some(seed)) = (generate.as_mut(), seed_override) {
            gen.seed = seed;
        }
        Ok(ResolvedConfig {
            system: cfg.system.clone(),
            dataset_manifest: cfg.dataset.as_ref().and_then(|d| d.manifest.clone()),
            dataset_generate: generate,
            symmetry,
            cond_bound: cfg.transform.cond_bound.unwrap_or(1e6),
            prony_order,
            prony_window: cfg.prony.window,
            prony_max_order: cfg.prony.max_order,
            estimator_mode: cfg.estimator.mode,
            tracked_hz: cfg.estimator.tracked_hz.clone(),
            groups: cfg.estimator.groups.clone(),
            target_pairs: cfg.estimator.target_pairs,
            shapes_from_report: cfg.estimator.shapes_from_report.clone(),
            compare_report: cfg.compare.as_ref().map(|c| c.report.clone()),
            output_dir: out_override
                .map(|p| p.to_path_buf())
                .or_else(|| cfg.output.dir.clone())
                .unwrap_or_else(|| PathBuf::from("out")),
            formats: cfg
                .output
                .formats
                .clone()
                .unwrap_or_else(|| vec!["json".into(), "csv".into()]),
        })
    }

    pub fn estimator_config(&self) -> EstimatorConfig {
        EstimatorConfig {
            symmetry: self.symmetry.clone(),
            target_pairs: self.target_pairs,
            cond_bound: self.cond_bound,
            prony_order: self.prony_order,
            max_order: self.prony_max_order,
            window: self.prony_window,
            tracked: match &self.tracked_hz {
                None => TrackedModes::All,
                Some(targets) => TrackedModes::ByFrequency {
                    targets: targets
                        .iter()
                        .map(|(hz, tol)| FrequencyTarget {
                            hz: *hz,
                            tol_hz: *tol,
                        })
                        .collect(),
                },
            },
            ..EstimatorConfig::default()
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("resolved config serializes")
    }

    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let digest = Sha256::digest(self.to_json().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
