//! TOML run configuration. Relative paths resolve against the config file's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::abundance::{VarianceMethod, DEFAULT_DRAWS};
use crate::data::{CovariateBinning, GridSchema, ObservationSchema, SegmentSchema, Units};
use crate::detection::DetectionSpec;
use crate::diagnostics::DEFAULT_SHIFT_THRESHOLD;
use crate::error::{DsmError, Result};
use crate::family::Family;
use crate::groupsize::SizeBin;
use crate::sim::{CoverageConfig, SimScenario};
use crate::smooth::SmoothSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub observations: Option<PathBuf>,
    pub segments: Option<PathBuf>,
    pub grid: Option<PathBuf>,
    #[serde(default)]
    pub observation_schema: ObservationSchema,
    #[serde(default)]
    pub segment_schema: SegmentSchema,
    #[serde(default)]
    pub grid_schema: GridSchema,
    /// Continuous effort covariates to cut into factor levels.
    #[serde(default)]
    pub binning: Vec<CovariateBinning>,
    #[serde(default)]
    pub units: Units,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DsmConfig {
    /// Detection report written by `fit-detection`.
    pub detection_fit: Option<PathBuf>,
    pub family: Family,
    /// Choose the Tweedie power by REML over the grid.
    #[serde(default)]
    pub search_power: bool,
    pub smooths: Vec<SmoothSpec>,
    #[serde(default)]
    pub group_size_bins: Vec<SizeBin>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsConfig {
    #[serde(default = "default_threshold")]
    pub shift_threshold: f64,
    /// Covariates to tabulate; defaults to the detection model's factors.
    #[serde(default)]
    pub group_by: Vec<String>,
}

fn default_threshold() -> f64 {
    DEFAULT_SHIFT_THRESHOLD
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            shift_threshold: DEFAULT_SHIFT_THRESHOLD,
            group_by: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictConfig {
    /// Fit bundle directory written by `fit-dsm`.
    pub bundle: Option<PathBuf>,
    #[serde(default = "default_methods")]
    pub methods: Vec<VarianceMethod>,
    #[serde(default = "default_draws")]
    pub draws: usize,
}

fn default_methods() -> Vec<VarianceMethod> {
    vec![VarianceMethod::Delta]
}

fn default_draws() -> usize {
    DEFAULT_DRAWS
}

impl Default for PredictConfig {
    fn default() -> Self {
        Self {
            bundle: None,
            methods: default_methods(),
            draws: DEFAULT_DRAWS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub output: Option<PathBuf>,
    pub data: DataConfig,
    pub detection: DetectionSpec,
    pub dsm: Option<DsmConfig>,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
    #[serde(default)]
    pub predict: PredictConfig,
}

/// Scenario file for `simulate` and `coverage`: scenario fields at top level plus an optional analysis table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageFile {
    pub analysis: Option<CoverageConfig>,
    pub replicates: Option<usize>,
}

/// Config text, where it came from, and its SHA-256.
#[derive(Debug, Clone)]
pub struct Loaded<T> {
    pub value: T,
    pub path: PathBuf,
    pub hash: String,
}

impl<T> Loaded<T> {
    pub fn base_dir(&self) -> &Path {
        self.path.parent().unwrap_or_else(|| Path::new("."))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir().join(p)
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn read(path: &Path) -> Result<(String, String)> {
    let bytes = std::fs::read(path).map_err(|e| DsmError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let hash = sha256_hex(&bytes);
    let text = String::from_utf8(bytes).map_err(|_| DsmError::Config(format!("{}: not UTF-8", path.display())))?;
    Ok((text, hash))
}

pub fn load_run_config(path: &Path) -> Result<Loaded<RunConfig>> {
    let (text, hash) = read(path)?;
    let value: RunConfig = toml::from_str(&text).map_err(|e| DsmError::Config(format!("{}: {e}", path.display())))?;
    if !(value.detection.truncation > 0.0) {
        return Err(DsmError::Config("detection.truncation must be positive".into()));
    }
    Ok(Loaded {
        value,
        path: path.to_path_buf(),
        hash,
    })
}

pub fn load_scenario(path: &Path) -> Result<Loaded<(SimScenario, CoverageFile)>> {
    let (text, hash) = read(path)?;
    let scenario = SimScenario::from_toml(&text).map_err(|e| DsmError::Config(format!("{}: {e}", path.display())))?;
    let extra: CoverageFile = toml::from_str(&text).map_err(|e| DsmError::Config(format!("{}: {e}", path.display())))?;
    Ok(Loaded {
        value: (scenario, extra),
        path: path.to_path_buf(),
        hash,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 3
[data]
observations = "obs.csv"
segments = "seg.csv"
[detection]
form = "hr"
truncation = 1.5
terms = [{ kind = "factor", name = "beaufort" }]
[dsm]
detection_fit = "out/detection.json"
family = { kind = "tweedie", power = 1.5 }
smooths = [{ name = "s(x,y)", covariates = ["x", "y"], type = "tensor", basis_dim = [5, 5] }]
[predict]
methods = ["delta", "posterior-sim"]
"#;

    #[test]
    fn parses_minimal_config_with_defaults() {
        let c: RunConfig = toml::from_str(MINIMAL).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.predict.draws, DEFAULT_DRAWS);
        assert_eq!(c.predict.methods, vec![VarianceMethod::Delta, VarianceMethod::PosteriorSim]);
        assert_eq!(c.data.segment_schema, SegmentSchema::default());
        assert_eq!(c.diagnostics.shift_threshold, 1.0);
        assert_eq!(c.dsm.unwrap().family, Family::Tweedie { power: 1.5 });
    }

    #[test]
    fn unknown_key_is_rejected() {
        let bad = MINIMAL.replace("seed = 3", "seed = 3\nsede = 4");
        assert!(toml::from_str::<RunConfig>(&bad).is_err());
    }

    #[test]
    fn hash_is_stable() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
