//! Run manifests: what data to use, how to filter it and which hardware to model.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::mrf::FilterConfig;
use crate::sim::HardwareConfig;
use crate::sparse::LayerPolicy;
use crate::tensor::{Matrix, SoftmaxMode};

use super::synth::{assemble, generate, PlantedSpec};
use super::tensor_file::TensorFile;
use super::CliError;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n: usize,
    /// Queries per head for simulation; attention always uses `n`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l: Option<usize>,
    /// Per-head feature size.
    pub d: usize,
    pub heads: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub planted: Option<PlantedSpec>,
}

/// Paths to `n x (heads * d)` projections, relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorSpec {
    pub q: PathBuf,
    pub k: PathBuf,
    pub v: PathBuf,
    pub heads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum WorkloadSpec {
    Synthetic(SyntheticSpec),
    Tensors(TensorSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum HardwareRef {
    Named(String),
    Inline(Box<HardwareConfig>),
}

impl HardwareRef {
    /// A preset name, a path to a JSON config, or an inline config.
    pub fn resolve(&self, base: &Path) -> Result<HardwareConfig, CliError> {
        match self {
            Self::Inline(cfg) => {
                cfg.validate()?;
                Ok((**cfg).clone())
            }
            Self::Named(name) => {
                if let Some(cfg) = HardwareConfig::preset(name) {
                    return Ok(cfg);
                }
                let path = base.join(name);
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
                Ok(HardwareConfig::from_json(&text)?)
            }
        }
    }
}

pub fn default_alpha_grid() -> Vec<f64> {
    vec![-0.2, -0.1, 0.0, 0.1, 0.2]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default = "default_alpha_grid")]
    pub alpha0: Vec<f64>,
    #[serde(default = "default_alpha_grid")]
    pub alpha1: Vec<f64>,
    /// When set, the sweep also calibrates an alpha pair for this pruning ratio.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_pruning: Option<f64>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            alpha0: default_alpha_grid(),
            alpha1: default_alpha_grid(),
            target_pruning: None,
        }
    }
}

/// Where the simulator takes per-query selections from.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SimSelections {
    /// Run the filter on the workload data and replay its selections.
    #[default]
    Measured,
    /// Fixed keep fractions; no data is generated.
    Synthetic { beta: f64, gamma: f64 },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSpec {
    #[serde(default)]
    pub selections: SimSelections,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub version: u32,
    pub workload: WorkloadSpec,
    #[serde(default)]
    pub filter: FilterConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hardware: Option<HardwareRef>,
    #[serde(default)]
    pub layer_policy: LayerPolicy,
    #[serde(default)]
    pub softmax: SoftmaxMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulate: Option<SimulateSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outputs: Option<OutputSpec>,
}

/// Attention inputs for a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub heads: usize,
    /// Planted keys per head and query, for synthetic planted workloads.
    pub planted: Option<Vec<Vec<Vec<usize>>>>,
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

impl RunManifest {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let m: Self = serde_json::from_str(text).map_err(|e| invalid(format!("manifest: {e}")))?;
        m.validate()?;
        Ok(m)
    }

    /// Reads a manifest and returns it with the directory its paths resolve against.
    pub fn load(path: &Path) -> Result<(Self, PathBuf), CliError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((Self::from_json(&text)?, base))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.version != MANIFEST_VERSION {
            return Err(invalid(format!(
                "manifest version {} (expected {MANIFEST_VERSION})",
                self.version
            )));
        }
        self.filter.validate()?;
        match &self.workload {
            WorkloadSpec::Synthetic(s) => {
                if s.n == 0 || s.d == 0 || s.heads == 0 {
                    return Err(invalid("synthetic n, d and heads must be positive"));
                }
                if s.l.is_some_and(|l| l == 0 || l > s.n) {
                    return Err(invalid("synthetic l must lie in [1, n]"));
                }
            }
            WorkloadSpec::Tensors(t) => {
                if t.heads == 0 {
                    return Err(invalid("heads must be positive"));
                }
            }
        }
        if let Some(s) = &self.sweep {
            if s.alpha0.is_empty() || s.alpha1.is_empty() {
                return Err(invalid("alpha grid must be non-empty"));
            }
            for &a in s.alpha0.iter().chain(&s.alpha1) {
                FilterConfig::two_round(a, 0.0)?;
            }
            if s.target_pruning.is_some_and(|t| !(t.is_finite() && t >= 1.0)) {
                return Err(invalid("target_pruning must be at least 1"));
            }
        }
        if let LayerPolicy::PerHead(flags) = &self.layer_policy {
            if flags.len() != self.heads() {
                return Err(invalid(format!(
                    "layer policy lists {} heads, workload has {}",
                    flags.len(),
                    self.heads()
                )));
            }
        }
        Ok(())
    }

    pub fn heads(&self) -> usize {
        match &self.workload {
            WorkloadSpec::Synthetic(s) => s.heads,
            WorkloadSpec::Tensors(t) => t.heads,
        }
    }

    /// Hex SHA-256 of the manifest's canonical JSON.
    pub fn sha256(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("manifest serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn load_data(&self, base: &Path) -> Result<Dataset, CliError> {
        match &self.workload {
            WorkloadSpec::Synthetic(s) => {
                let heads = generate(s.seed, s.n, s.d, s.heads, s.planted.as_ref());
                let planted = s
                    .planted
                    .filter(|p| p.keys_per_query > 0)
                    .map(|_| heads.iter().map(|h| h.planted.clone()).collect());
                let (q, k, v) = assemble(&heads);
                Ok(Dataset {
                    q,
                    k,
                    v,
                    heads: s.heads,
                    planted,
                })
            }
            WorkloadSpec::Tensors(t) => {
                let read = |p: &Path| -> Result<Matrix, CliError> {
                    let path = base.join(p);
                    let file = TensorFile::read(&path).map_err(|e| CliError::from_tensor_file(&path, e))?;
                    file.to_matrix().map_err(|e| CliError::from_tensor_file(&path, e))
                };
                let (q, k, v) = (read(&t.q)?, read(&t.k)?, read(&t.v)?);
                if q.shape() != k.shape() || k.shape() != v.shape() {
                    return Err(invalid(format!(
                        "Q {:?}, K {:?}, V {:?} must share a shape",
                        q.shape(),
                        k.shape(),
                        v.shape()
                    )));
                }
                if q.cols() % t.heads != 0 {
                    return Err(invalid(format!("model dim {} not divisible by {} heads", q.cols(), t.heads)));
                }
                Ok(Dataset {
                    q,
                    k,
                    v,
                    heads: t.heads,
                    planted: None,
                })
            }
        }
    }
}
