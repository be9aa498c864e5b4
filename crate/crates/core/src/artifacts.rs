//! JSON artifacts passed between CLI stages. Field layout is part of the
//! on-disk format; see docs/formats.md.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fsutil::write_atomic;
use crate::metrics::GroundTruthSlices;
use crate::pipeline::EvalReport;
use crate::retrieval::Similarity;
use crate::slicer::{SliceReport, TauPolicy};
use crate::synthbench::GroundTruthFile;

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("missing input {0}")]
    Missing(String),
    #[error("cannot parse {path}: {message}")]
    Parse { path: String, message: String },
    #[error("cannot write {path}: {message}")]
    Io { path: String, message: String },
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, ArtifactError> {
    if !path.exists() {
        return Err(ArtifactError::Missing(path.display().to_string()));
    }
    let text = fs::read_to_string(path)
        .map_err(|e| ArtifactError::Io { path: path.display().to_string(), message: e.to_string() })?;
    serde_json::from_str(&text).map_err(|e| ArtifactError::Parse { path: path.display().to_string(), message: e.to_string() })
}

/// Pretty JSON with a trailing newline, written atomically.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ArtifactError> {
    let mut text = serde_json::to_string_pretty(value).expect("artifact serializes");
    text.push('\n');
    write_text(path, &text)
}

pub fn write_text(path: &Path, text: &str) -> Result<(), ArtifactError> {
    let io = |e: std::io::Error| ArtifactError::Io { path: path.display().to_string(), message: e.to_string() };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io)?;
    }
    write_atomic(path, text.as_bytes()).map_err(io)
}

/// `discover/discover.json`: which classes were analyzed and how.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoverIndex {
    pub dataset: String,
    pub class_names: Vec<String>,
    /// Classes with a prompt and hypothesis file, ascending.
    pub classes: Vec<usize>,
    pub top_k: usize,
    pub similarity: Similarity,
    pub task: String,
    pub modality: String,
    pub medical: bool,
    pub provider: String,
    pub warnings: Vec<String>,
}

impl DiscoverIndex {
    pub fn topk_file(class_label: usize) -> String {
        format!("topk_c{class_label}.json")
    }

    pub fn prompt_file(class_label: usize) -> String {
        format!("prompt_c{class_label}.txt")
    }

    pub fn hypotheses_file(class_label: usize) -> String {
        format!("hypotheses_c{class_label}.json")
    }
}

/// `slices.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlicesFile {
    pub dataset: String,
    pub class_names: Vec<String>,
    pub similarity: Similarity,
    pub tau: TauPolicy,
    pub gap_threshold: f64,
    pub n_hypotheses: usize,
    /// Sorted by gap, descending.
    pub reports: Vec<SliceReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalEcho {
    pub similarity: Similarity,
    pub n_heads: usize,
    pub k: Vec<usize>,
    pub ground_truth_split: Option<String>,
}

/// `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub config: EvalEcho,
    pub eval: EvalReport,
    /// Precision@k of the flagged slices against ground truth, keyed by k.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub precision_at_k: BTreeMap<String, f64>,
}

/// Reads ground truth either as a synthbench `ground_truth.json` (picking
/// `split`) or as a bare `{slices: [...]}` object.
pub fn read_ground_truth(path: &Path, split: &str) -> Result<GroundTruthSlices, ArtifactError> {
    let value: serde_json::Value = read_json(path)?;
    let parse = |message: String| ArtifactError::Parse { path: path.display().to_string(), message };
    if value.get("slices").is_some() {
        return serde_json::from_value(value).map_err(|e| parse(e.to_string()));
    }
    let file: GroundTruthFile = serde_json::from_value(value).map_err(|e| parse(e.to_string()))?;
    match split {
        "validation" => Ok(file.validation),
        "test" => Ok(file.test),
        other => Err(parse(format!("unknown ground-truth split {other:?}; expected validation or test"))),
    }
}
