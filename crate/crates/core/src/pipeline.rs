//! Stage runners shared by the CLI, the synthetic benchmark and the tests.
//! Each stage works on in-memory artifacts exactly as they are stored on
//! disk, so a replay from files reproduces the in-memory run bit for bit.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::artifacts::ArtifactError;
use crate::corpus::{CorpusError, EmbeddingMatrix, SliceDataset, TextCorpus};
use crate::hypothesis::{build_prompt, HypothesisError, HypothesisSet, LlmClient, DEFAULT_MAX_HYPOTHESES};
use crate::matrix::Matrix;
use crate::metrics::{auroc, clip_score, mean_accuracy, worst_group_accuracy_multi, GroupAccuracy, MetricsError, NamedSlice, PredictedSlices};
use crate::mitigator::{route, LinearHead, MitigationBundle, MitigationError};
use crate::projection::{fit_projection, project, AffineProjector, ProjectionError};
use crate::retrieval::{mean_difference, retrieve_topk, DeltaVector, RetrievalError, RetrievedSentence, Similarity, DEFAULT_TOP_K_NATURAL};
use crate::slicer::{detect_error_slices, sort_reports, EmbeddingProvider, SliceConfig, SliceError, SliceReport};

pub const DEFAULT_TASK: &str = "shape";
pub const DEFAULT_MODALITY: &str = "natural images";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("dataset {0} has no vlr_image embeddings")]
    MissingVlr(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("no class could be analyzed: {}", .0.join("; "))]
    NothingToAnalyze(Vec<String>),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Projection(#[from] ProjectionError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Hypothesis(#[from] HypothesisError),
    #[error(transparent)]
    Slice(#[from] SliceError),
    #[error(transparent)]
    Mitigation(#[from] MitigationError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
}

impl PipelineError {
    /// Stable machine-readable error name.
    pub fn kind(&self) -> &'static str {
        match self {
            PipelineError::MissingInput(_) => "MissingInput",
            PipelineError::MissingVlr(_) => "MissingVlr",
            PipelineError::Config(_) => "ConfigError",
            PipelineError::NothingToAnalyze(_) => "NothingToAnalyze",
            PipelineError::Corpus(e) => match e {
                CorpusError::MissingFile(_) => "MissingFile",
                CorpusError::RowCountMismatch { .. } => "RowCountMismatch",
                CorpusError::DuplicateId(_) => "DuplicateId",
                CorpusError::BadLabel { .. } => "BadLabel",
                CorpusError::BadMagic(_) => "BadMagic",
                CorpusError::NonFinite { .. } => "NonFinite",
                CorpusError::ShapeMismatch { .. } => "ShapeMismatch",
                CorpusError::UnsupportedVersion(_) => "UnsupportedVersion",
                _ => "CorpusError",
            },
            PipelineError::Projection(ProjectionError::SingularSystem) => "SingularSystem",
            PipelineError::Projection(_) => "ProjectionError",
            PipelineError::Retrieval(_) => "RetrievalError",
            PipelineError::Hypothesis(e) => match e {
                HypothesisError::Auth { .. } => "AuthError",
                HypothesisError::Http { .. } => "HttpError",
                HypothesisError::Parse { .. } => "ParseError",
                HypothesisError::Pairing(_) => "PairingError",
                HypothesisError::MockMissing(_) => "MockMissing",
                _ => "HypothesisError",
            },
            PipelineError::Slice(SliceError::EmbedderUnavailable(_)) => "EmbedderUnavailable",
            PipelineError::Slice(_) => "SliceError",
            PipelineError::Mitigation(MitigationError::NoErrorSlices) => "NoErrorSlices",
            PipelineError::Mitigation(_) => "MitigationError",
            PipelineError::Metrics(_) => "MetricsError",
            PipelineError::Artifact(ArtifactError::Missing(_)) => "MissingInput",
            PipelineError::Artifact(ArtifactError::Parse { .. }) => "ParseError",
            PipelineError::Artifact(ArtifactError::Io { .. }) => "IoError",
        }
    }
}

fn round_to_f32(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = *x as f32 as f64);
}

/// Fits the projection on a training split and rounds it to storage precision.
pub fn fit_stage(train: &SliceDataset, ridge: f64) -> Result<AffineProjector, PipelineError> {
    let targets = train.vlr_image.as_ref().ok_or_else(|| PipelineError::MissingVlr(train.name.clone()))?;
    let mut p = fit_projection(&train.features.to_matrix(), &targets.to_matrix(), ridge)?;
    let (rows, cols) = (p.weights.rows(), p.weights.cols());
    let mut w = p.weights.as_slice().to_vec();
    round_to_f32(&mut w);
    p.weights = Matrix::from_vec(rows, cols, w);
    round_to_f32(&mut p.bias);
    Ok(p)
}

pub fn project_dataset(projector: &AffineProjector, dataset: &SliceDataset) -> Result<Matrix, PipelineError> {
    Ok(project(projector, &dataset.features.to_matrix())?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoverConfig {
    pub top_k: usize,
    pub similarity: Similarity,
    pub task: String,
    pub modality: String,
    pub medical: bool,
    pub max_hypotheses: usize,
}

impl Default for DiscoverConfig {
    fn default() -> Self {
        Self {
            top_k: DEFAULT_TOP_K_NATURAL,
            similarity: Similarity::Cosine,
            task: DEFAULT_TASK.to_string(),
            modality: DEFAULT_MODALITY.to_string(),
            medical: false,
            max_hypotheses: DEFAULT_MAX_HYPOTHESES,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassPrompt {
    pub class_label: usize,
    pub delta: DeltaVector,
    pub topk: Vec<RetrievedSentence>,
    pub prompt: String,
}

/// Δ, top-K retrieval and prompt for every class that has both correct and
/// misclassified samples. Other classes are skipped with a warning.
pub fn class_prompts(
    dataset: &SliceDataset,
    projected: &Matrix,
    corpus: &TextCorpus,
    config: &DiscoverConfig,
) -> Result<(Vec<ClassPrompt>, Vec<String>), PipelineError> {
    let mut prompts = Vec::new();
    let mut warnings = Vec::new();
    for class_label in 0..dataset.n_classes() {
        let delta = match mean_difference(projected, dataset, class_label) {
            Ok(d) => d,
            Err(e @ RetrievalError::DegenerateClass { .. }) => {
                log::warn!("{e}");
                warnings.push(e.to_string());
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let topk = retrieve_topk(&delta, corpus, config.top_k, config.similarity)?;
        let sentences: Vec<String> = topk.iter().map(|s| s.text.clone()).collect();
        let prompt = build_prompt(&config.task, &config.modality, &sentences, config.top_k, config.medical)?;
        prompts.push(ClassPrompt { class_label, delta, topk, prompt });
    }
    if prompts.is_empty() {
        return Err(PipelineError::NothingToAnalyze(warnings));
    }
    Ok((prompts, warnings))
}

/// Sends every class prompt to the LLM, one request per class.
pub fn generate_all(
    prompts: &[ClassPrompt],
    client: &LlmClient,
    max_hypotheses: usize,
) -> Result<Vec<HypothesisSet>, PipelineError> {
    prompts
        .iter()
        .map(|p| {
            Ok(client
                .generate_hypotheses(&p.prompt)?
                .with_class(p.class_label)
                .truncated(max_hypotheses))
        })
        .collect()
}

/// Slice reports for all hypothesis sets, merged and sorted by gap.
pub fn find_slices(
    dataset: &SliceDataset,
    projected: &Matrix,
    sets: &[HypothesisSet],
    embedder: &dyn EmbeddingProvider,
    config: &SliceConfig,
) -> Result<Vec<SliceReport>, PipelineError> {
    let mut all = Vec::new();
    for set in sets {
        all.extend(detect_error_slices(dataset, projected, set, embedder, config)?);
    }
    sort_reports(&mut all);
    Ok(all)
}

/// Flagged slices as ranked predicted slices (members already sorted by ascending s_H).
pub fn predicted_slices(reports: &[SliceReport]) -> PredictedSlices {
    PredictedSlices {
        slices: reports
            .iter()
            .filter(|r| r.is_error_slice)
            .map(|r| NamedSlice { name: format!("c{}:{}", r.class_label, r.hypothesis_id), members: r.members.clone() })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetrics {
    pub name: String,
    pub mean_accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wga: Option<GroupAccuracy>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_auroc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadUsage {
    pub hypothesis_id: String,
    pub attribute: String,
    pub routed: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub n_samples: usize,
    pub group_keys: Vec<String>,
    pub source: ModelMetrics,
    pub erm_head: ModelMetrics,
    pub ensemble: ModelMetrics,
    pub heads: Vec<ModelMetrics>,
    pub routing: Vec<HeadUsage>,
}

/// One-vs-rest AUROC averaged over classes with both outcomes present.
fn mean_auroc(dataset: &SliceDataset, probs: &[Vec<f64>]) -> Option<f64> {
    let c = dataset.n_classes();
    let per_class: Vec<f64> = (0..if c == 2 { 1 } else { c })
        .filter_map(|k| {
            let k = if c == 2 { 1 } else { k };
            let labels: Vec<u8> = dataset.samples.iter().map(|s| u8::from(s.label == k)).collect();
            let scores: Vec<f64> = probs.iter().map(|p| p[k]).collect();
            auroc(&scores, &labels).ok()
        })
        .collect();
    (!per_class.is_empty()).then(|| per_class.iter().sum::<f64>() / per_class.len() as f64)
}

fn model_metrics(
    name: &str,
    dataset: &SliceDataset,
    predictions: &[usize],
    probs: Option<&[Vec<f64>]>,
    group_keys: &[&str],
) -> Result<ModelMetrics, PipelineError> {
    let wga = if group_keys.is_empty() { None } else { Some(worst_group_accuracy_multi(dataset, predictions, group_keys)?) };
    Ok(ModelMetrics {
        name: name.to_string(),
        mean_accuracy: mean_accuracy(dataset, predictions)?,
        wga,
        mean_auroc: probs.and_then(|p| mean_auroc(dataset, p)),
    })
}

fn head_outputs(head: &LinearHead, features: &Matrix) -> (Vec<usize>, Vec<Vec<f64>>) {
    (0..features.rows())
        .map(|i| {
            let x = features.row(i);
            (head.predict_row(x), head.predict_proba(x))
        })
        .unzip()
}

/// Group keys carried by every sample, sorted.
pub fn common_group_keys(dataset: &SliceDataset) -> Vec<String> {
    let Some(first) = dataset.samples.first() else { return Vec::new() };
    first
        .groups
        .keys()
        .filter(|k| dataset.samples.iter().all(|s| s.groups.contains_key(*k)))
        .cloned()
        .collect()
}

/// Source predictions, the ERM control head, every single head and the
/// routed ensemble on one split.
pub fn evaluate(
    dataset: &SliceDataset,
    projected: &Matrix,
    bundle: &MitigationBundle,
    group_keys: &[&str],
) -> Result<EvalReport, PipelineError> {
    let features = dataset.features.to_matrix();
    if projected.rows() != dataset.len() {
        return Err(PipelineError::Config("projected matrix does not match the dataset".into()));
    }
    let source_probs: Option<Vec<Vec<f64>>> = if dataset.n_classes() == 2 && dataset.samples.iter().all(|s| s.score.is_some()) {
        Some(dataset.samples.iter().map(|s| {
            let p = s.score.unwrap_or(0.0);
            vec![1.0 - p, p]
        }).collect())
    } else {
        None
    };
    let source = model_metrics("source", dataset, &dataset.predictions(), source_probs.as_deref(), group_keys)?;

    let (erm_pred, erm_probs) = head_outputs(&bundle.erm_head, &features);
    let erm_head = model_metrics("erm_head", dataset, &erm_pred, Some(&erm_probs), group_keys)?;

    let outputs: Vec<(Vec<usize>, Vec<Vec<f64>>)> = bundle.heads.iter().map(|h| head_outputs(&h.head, &features)).collect();
    let heads = bundle
        .heads
        .iter()
        .zip(&outputs)
        .map(|(h, (pred, probs))| model_metrics(&h.hypothesis_id, dataset, pred, Some(probs), group_keys))
        .collect::<Result<Vec<_>, _>>()?;

    let mut routed = vec![0usize; bundle.heads.len()];
    let mut ens_pred = Vec::with_capacity(dataset.len());
    let mut ens_probs = Vec::with_capacity(dataset.len());
    for i in 0..dataset.len() {
        let k = route(projected.row(i), bundle)?;
        routed[k] += 1;
        ens_pred.push(outputs[k].0[i]);
        ens_probs.push(outputs[k].1[i].clone());
    }
    let ensemble = model_metrics("ensemble", dataset, &ens_pred, Some(&ens_probs), group_keys)?;

    let routing = bundle
        .heads
        .iter()
        .zip(routed)
        .map(|(h, n)| {
            let members = dataset.class_members(h.class_label);
            let (c, w): (Vec<usize>, Vec<usize>) = members.into_iter().partition(|&i| dataset.samples[i].is_correct());
            let clip = clip_score(&h.embedding.vector, &projected.select_rows(&c), &projected.select_rows(&w)).ok();
            HeadUsage { hypothesis_id: h.hypothesis_id.clone(), attribute: h.attribute.clone(), routed: n, clip_score: clip }
        })
        .collect();

    Ok(EvalReport {
        dataset: dataset.name.clone(),
        n_samples: dataset.len(),
        group_keys: group_keys.iter().map(|k| k.to_string()).collect(),
        source,
        erm_head,
        ensemble,
        heads,
        routing,
    })
}

/// Projected rows stored at f32, as the CLI would write them.
pub fn projected_embeddings(projected: &Matrix) -> Result<EmbeddingMatrix, PipelineError> {
    Ok(EmbeddingMatrix::from_rows(projected.cols(), &(0..projected.rows()).map(|i| projected.row(i)).collect::<Vec<_>>())?)
}
