//! JSON configuration of each subcommand. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use semenet::imageproc::Rect;
use semenet::nn::ModelConfig;
use semenet::pipeline::experiments::AblationConfig;
use semenet::pipeline::TokenSpec;
use semenet::training::TrainConfig;

use crate::CliError;

/// Reads `path` as `T`, or `T::default()` without a path.
pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, CliError> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("config {}: {e}", p.display())))
        }
    }
}

pub fn required<'a, T>(value: &'a Option<T>, key: &str) -> Result<&'a T, CliError> {
    value.as_ref().ok_or_else(|| CliError::Validation(format!("config key '{key}' is required")))
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IngestConfig {
    pub root: Option<PathBuf>,
    /// Train / validation / test fractions.
    pub ratios: Option<[f64; 3]>,
    pub seed: u64,
    pub skip_bad: bool,
}

/// Shared by `train` and `segment-train`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainCommandConfig {
    pub manifest: Option<PathBuf>,
    /// Preset name; the class count comes from the manifest.
    pub preset: Option<String>,
    /// Square input side of a preset; defaults to the side of the first training image.
    pub input_size: Option<usize>,
    /// Full model description, instead of a preset.
    pub model: Option<ModelConfig>,
    pub train: TrainConfig,
    /// Segmentation checkpoint used to lung-mask the training images.
    pub mask_model: Option<PathBuf>,
    /// With a mask model, train on the original and masked images together.
    pub union_masked: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub manifest: Option<PathBuf>,
    pub batch_size: usize,
    pub mask_model: Option<PathBuf>,
    pub mask_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { manifest: None, batch_size: 16, mask_model: None, mask_threshold: 0.5 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentConfig {
    /// Needed with `--split`.
    pub manifest: Option<PathBuf>,
    pub threshold: f64,
    pub postprocess: bool,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        SegmentConfig { manifest: None, threshold: 0.5, postprocess: true }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplainConfig {
    /// Grad-CAM layer; defaults to the last spatial layer before pooling.
    pub layer: Option<String>,
    pub alpha: f64,
    /// Region whose share of the heatmap is reported.
    pub region: Rect,
    pub mask_model: Option<PathBuf>,
    pub mask_threshold: f64,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        ExplainConfig { layer: None, alpha: 0.5, region: TokenSpec::default().rect(), mask_model: None, mask_threshold: 0.5 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CascadeCommandConfig {
    pub stage1: Option<PathBuf>,
    pub stage2: Option<PathBuf>,
    pub mask_model: Option<PathBuf>,
    pub mask_threshold: f64,
    pub route_label: String,
    /// Labeled images for `--split`; labels are the leaf names.
    pub manifest: Option<PathBuf>,
}

impl Default for CascadeCommandConfig {
    fn default() -> Self {
        CascadeCommandConfig {
            stage1: None,
            stage2: None,
            mask_model: None,
            mask_threshold: 0.5,
            route_label: "viral".into(),
            manifest: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    /// Op names; empty means every registered op.
    pub ops: Vec<String>,
    pub trials: usize,
    pub seed: u64,
    /// Input names treated as constants.
    pub frozen: Vec<String>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig { ops: Vec::new(), trials: 10, seed: 0, frozen: Vec::new() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupBy {
    #[default]
    Label,
    Split,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistConfig {
    pub manifest: Option<PathBuf>,
    pub k: usize,
    pub hash_side: usize,
    pub seed: u64,
    pub group_by: GroupBy,
}

impl Default for DistConfig {
    fn default() -> Self {
        DistConfig { manifest: None, k: 2, hash_side: 8, seed: 0, group_by: GroupBy::Label }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub manifest: Option<PathBuf>,
    pub ablation: AblationConfig,
}
