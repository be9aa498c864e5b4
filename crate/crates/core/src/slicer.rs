//! Hypothesis scoring and error-slice extraction.
//!
//! Every sample is scored against the mean text embedding of a hypothesis'
//! test sentences; class members scoring below τ form the slice where the
//! attribute is absent. A slice is an error slice when its error rate exceeds
//! the class error by at least the gap threshold.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::corpus::{SliceDataset, TextCorpus};
use crate::hypothesis::{post_json, HttpFailure, HttpRetryPolicy, Hypothesis, HypothesisSet, DEFAULT_API_KEY_ENV};
use crate::matrix::{dot, Matrix};
use crate::retrieval::{class_error_rate, RetrievalError, Similarity};

pub const DEFAULT_GAP_THRESHOLD: f64 = 0.10;

#[derive(Debug, Error)]
pub enum SliceError {
    #[error("embedder unavailable: {0}")]
    EmbedderUnavailable(String),
    #[error("hypothesis {0} has no test sentences")]
    EmptySentenceSet(String),
    #[error("dimension mismatch: expected {expected}, found {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("{what} has {actual} entries but the dataset has {expected} samples")]
    LengthMismatch { what: &'static str, expected: usize, actual: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid tau policy: {0}")]
    InvalidTau(String),
    #[error("class {0} has no samples")]
    EmptyClass(usize),
    #[error("hypothesis set is empty")]
    NoHypotheses,
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
}

/// Turns sentences into text embeddings in the same space as the projected features.
pub trait EmbeddingProvider: Sync {
    fn embed(&self, sentences: &[String]) -> Result<Vec<Vec<f64>>, SliceError>;
}

fn loose_key(text: &str) -> String {
    let collapsed = text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    collapsed.trim_end_matches(['.', '!', '?', ';', ',']).trim_end().to_string()
}

/// Reuses stored corpus embeddings: a sentence resolves to the corpus entry with
/// identical text, falling back to a case/whitespace/trailing-punctuation
/// insensitive match. Unresolvable sentences are an error, never a guess.
pub struct LookupEmbedder<'a> {
    corpus: &'a TextCorpus,
    exact: HashMap<&'a str, usize>,
    loose: HashMap<String, usize>,
}

impl<'a> LookupEmbedder<'a> {
    pub fn new(corpus: &'a TextCorpus) -> Self {
        let mut exact = HashMap::new();
        let mut loose = HashMap::new();
        for (i, s) in corpus.sentences.iter().enumerate() {
            exact.entry(s.text.as_str()).or_insert(i);
            loose.entry(loose_key(&s.text)).or_insert(i);
        }
        Self { corpus, exact, loose }
    }

    pub fn resolve(&self, sentence: &str) -> Option<usize> {
        self.exact
            .get(sentence)
            .or_else(|| self.loose.get(&loose_key(sentence)))
            .copied()
    }
}

impl EmbeddingProvider for LookupEmbedder<'_> {
    fn embed(&self, sentences: &[String]) -> Result<Vec<Vec<f64>>, SliceError> {
        sentences
            .iter()
            .map(|s| {
                self.resolve(s)
                    .map(|i| self.corpus.embeddings.row_f64(i))
                    .ok_or_else(|| SliceError::EmbedderUnavailable(format!("sentence not in corpus: {s:?}")))
            })
            .collect()
    }
}

/// Calls an embedding endpoint speaking the common `{model, input: [...]}` →
/// `{data: [{embedding: [...]}, ...]}` shape.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteEmbedder {
    pub endpoint: String,
    pub model: String,
    pub api_key_env: String,
    pub auth_header: String,
    pub auth_scheme: String,
    pub timeout_secs: u64,
    pub retry: HttpRetryPolicy,
}

impl Default for RemoteEmbedder {
    fn default() -> Self {
        Self {
            endpoint: String::new(),
            model: String::new(),
            api_key_env: DEFAULT_API_KEY_ENV.to_string(),
            auth_header: "Authorization".to_string(),
            auth_scheme: "Bearer".to_string(),
            timeout_secs: 120,
            retry: HttpRetryPolicy::default(),
        }
    }
}

impl EmbeddingProvider for RemoteEmbedder {
    fn embed(&self, sentences: &[String]) -> Result<Vec<Vec<f64>>, SliceError> {
        let mut headers = Vec::new();
        if let Ok(key) = std::env::var(&self.api_key_env) {
            let value = if self.auth_scheme.is_empty() { key } else { format!("{} {key}", self.auth_scheme) };
            headers.push((self.auth_header.clone(), value));
        }
        let body = json!({"model": self.model, "input": sentences});
        let raw = post_json(&self.endpoint, &headers, &body, Duration::from_secs(self.timeout_secs), &self.retry)
            .map_err(|f| {
                SliceError::EmbedderUnavailable(match f {
                    HttpFailure::Status { status, body } => format!("status {status}: {}", body.chars().take(200).collect::<String>()),
                    HttpFailure::Transport(m) => m,
                })
            })?;
        let bad = |m: &str| SliceError::EmbedderUnavailable(format!("malformed embedding response: {m}"));
        let v: Value = serde_json::from_str(&raw).map_err(|e| bad(&e.to_string()))?;
        let data = v.get("data").and_then(Value::as_array).ok_or_else(|| bad("missing data array"))?;
        if data.len() != sentences.len() {
            return Err(bad(&format!("{} embeddings for {} sentences", data.len(), sentences.len())));
        }
        data.iter()
            .map(|item| {
                item.get("embedding")
                    .and_then(Value::as_array)
                    .and_then(|xs| xs.iter().map(Value::as_f64).collect::<Option<Vec<f64>>>())
                    .ok_or_else(|| bad("embedding is not a list of numbers"))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisEmbedding {
    pub hypothesis_id: String,
    pub vector: Vec<f64>,
    pub n_sentences: usize,
}

/// Mean of the test-sentence embeddings; each is l2-normalized first under cosine.
pub fn hypothesis_embedding(
    hypothesis: &Hypothesis,
    embedder: &dyn EmbeddingProvider,
    similarity: Similarity,
) -> Result<HypothesisEmbedding, SliceError> {
    if hypothesis.test_sentences.is_empty() {
        return Err(SliceError::EmptySentenceSet(hypothesis.id.clone()));
    }
    let vectors = embedder.embed(&hypothesis.test_sentences)?;
    let dim = vectors.first().map(Vec::len).unwrap_or(0);
    let mut mean = vec![0.0; dim];
    for v in &vectors {
        if v.len() != dim {
            return Err(SliceError::DimensionMismatch { expected: dim, actual: v.len() });
        }
        for (m, x) in mean.iter_mut().zip(similarity.prepare(v)) {
            *m += x;
        }
    }
    let n = vectors.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    if mean.iter().any(|x| !x.is_finite()) {
        return Err(SliceError::NonFinite(format!("embedding of hypothesis {}", hypothesis.id)));
    }
    Ok(HypothesisEmbedding {
        hypothesis_id: hypothesis.id.clone(),
        vector: mean,
        n_sentences: vectors.len(),
    })
}

/// s_H for every row of `projected`.
pub fn score_hypothesis(
    projected: &Matrix,
    hyp: &HypothesisEmbedding,
    similarity: Similarity,
) -> Result<Vec<f64>, SliceError> {
    if projected.cols() != hyp.vector.len() {
        return Err(SliceError::DimensionMismatch { expected: projected.cols(), actual: hyp.vector.len() });
    }
    let h = similarity.prepare(&hyp.vector);
    Ok((0..projected.rows())
        .into_par_iter()
        .map(|i| dot(&similarity.prepare(projected.row(i)), &h))
        .collect())
}

/// How τ is chosen from the class members' scores.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum TauPolicy {
    #[default]
    Median,
    /// Linear-interpolated percentile, p ∈ [0, 100].
    Percentile(f64),
    Fixed(f64),
}

impl TauPolicy {
    pub fn threshold(&self, class_scores: &[f64]) -> Result<f64, SliceError> {
        match *self {
            TauPolicy::Fixed(v) => Ok(v),
            TauPolicy::Median => percentile(class_scores, 50.0),
            TauPolicy::Percentile(p) => percentile(class_scores, p),
        }
    }
}

fn percentile(values: &[f64], p: f64) -> Result<f64, SliceError> {
    if values.is_empty() {
        return Err(SliceError::InvalidTau("no scores to take a percentile of".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64))
}

impl fmt::Display for TauPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TauPolicy::Median => f.write_str("median"),
            TauPolicy::Percentile(p) => write!(f, "percentile:{p}"),
            TauPolicy::Fixed(v) => write!(f, "fixed:{v}"),
        }
    }
}

impl FromStr for TauPolicy {
    type Err = SliceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || SliceError::InvalidTau(format!("{s:?} (expected median, percentile:<0-100> or fixed:<value>)"));
        if s == "median" {
            return Ok(TauPolicy::Median);
        }
        let (kind, arg) = s.split_once(':').ok_or_else(bad)?;
        let v: f64 = arg.trim().parse().map_err(|_| bad())?;
        if !v.is_finite() {
            return Err(bad());
        }
        match kind {
            "percentile" if (0.0..=100.0).contains(&v) => Ok(TauPolicy::Percentile(v)),
            "fixed" => Ok(TauPolicy::Fixed(v)),
            _ => Err(bad()),
        }
    }
}

impl Serialize for TauPolicy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TauPolicy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Class members whose score is strictly below τ, in dataset order.
pub fn extract_slice(
    scores: &[f64],
    dataset: &SliceDataset,
    class_label: usize,
    tau: f64,
) -> Result<Vec<usize>, SliceError> {
    if scores.len() != dataset.len() {
        return Err(SliceError::LengthMismatch { what: "score list", expected: dataset.len(), actual: scores.len() });
    }
    Ok(dataset
        .class_members(class_label)
        .into_iter()
        .filter(|&i| scores[i] < tau)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceConfig {
    pub similarity: Similarity,
    pub tau: TauPolicy,
    pub gap_threshold: f64,
    pub max_hypotheses: usize,
}

impl Default for SliceConfig {
    fn default() -> Self {
        Self {
            similarity: Similarity::Cosine,
            tau: TauPolicy::Median,
            gap_threshold: DEFAULT_GAP_THRESHOLD,
            max_hypotheses: crate::hypothesis::DEFAULT_MAX_HYPOTHESES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceReport {
    #[serde(rename = "class")]
    pub class_label: usize,
    pub hypothesis_id: String,
    pub attribute: String,
    pub threshold: f64,
    /// Slice members, most confident first (ascending s_H, then index).
    pub members: Vec<usize>,
    pub slice_size: usize,
    pub class_size: usize,
    pub slice_error: f64,
    pub class_error: f64,
    pub gap: f64,
    pub is_error_slice: bool,
    /// Accuracy on class members where the attribute is present (score ≥ τ).
    pub accuracy_present: Option<f64>,
    /// Accuracy on the slice (attribute absent).
    pub accuracy_absent: Option<f64>,
    /// s_H for every dataset sample; kept only on request.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<f64>>,
}

fn accuracy(dataset: &SliceDataset, idx: &[usize]) -> Option<f64> {
    (!idx.is_empty()).then(|| idx.iter().filter(|&&i| dataset.samples[i].is_correct()).count() as f64 / idx.len() as f64)
}

/// Builds one report from precomputed full-dataset scores.
pub fn slice_report(
    dataset: &SliceDataset,
    hypothesis: &Hypothesis,
    class_label: usize,
    scores: Vec<f64>,
    tau_policy: TauPolicy,
    gap_threshold: f64,
) -> Result<SliceReport, SliceError> {
    let members = dataset.class_members(class_label);
    if members.is_empty() {
        return Err(SliceError::EmptyClass(class_label));
    }
    if scores.len() != dataset.len() {
        return Err(SliceError::LengthMismatch { what: "score list", expected: dataset.len(), actual: scores.len() });
    }
    let class_scores: Vec<f64> = members.iter().map(|&i| scores[i]).collect();
    let tau = tau_policy.threshold(&class_scores)?;
    let mut slice = extract_slice(&scores, dataset, class_label, tau)?;
    let present: Vec<usize> = members.iter().copied().filter(|&i| scores[i] >= tau).collect();
    let class_error = class_error_rate(dataset, class_label, None)?;
    let slice_error = if slice.is_empty() { 0.0 } else { class_error_rate(dataset, class_label, Some(&slice))? };
    let gap = slice_error - class_error;
    slice.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    Ok(SliceReport {
        class_label,
        hypothesis_id: hypothesis.id.clone(),
        attribute: hypothesis.attribute.clone(),
        threshold: tau,
        slice_size: slice.len(),
        class_size: members.len(),
        is_error_slice: !slice.is_empty() && gap >= gap_threshold,
        accuracy_present: accuracy(dataset, &present),
        accuracy_absent: accuracy(dataset, &slice),
        members: slice,
        slice_error,
        class_error,
        gap,
        scores: Some(scores),
    })
}

pub fn embed_hypotheses(
    hyps: &HypothesisSet,
    embedder: &dyn EmbeddingProvider,
    similarity: Similarity,
    max_hypotheses: usize,
) -> Result<Vec<HypothesisEmbedding>, SliceError> {
    hyps.hypotheses
        .iter()
        .take(max_hypotheses)
        .map(|h| hypothesis_embedding(h, embedder, similarity))
        .collect()
}

/// Reports sorted by gap (descending), ties broken by hypothesis id.
/// Every report carries its scores; callers drop them before writing if unwanted.
pub fn detect_error_slices(
    dataset: &SliceDataset,
    projected: &Matrix,
    hyps: &HypothesisSet,
    embedder: &dyn EmbeddingProvider,
    config: &SliceConfig,
) -> Result<Vec<SliceReport>, SliceError> {
    let embeddings = embed_hypotheses(hyps, embedder, config.similarity, config.max_hypotheses)?;
    detect_with_embeddings(dataset, projected, hyps, &embeddings, config)
}

pub fn detect_with_embeddings(
    dataset: &SliceDataset,
    projected: &Matrix,
    hyps: &HypothesisSet,
    embeddings: &[HypothesisEmbedding],
    config: &SliceConfig,
) -> Result<Vec<SliceReport>, SliceError> {
    if hyps.hypotheses.is_empty() {
        return Err(SliceError::NoHypotheses);
    }
    if projected.rows() != dataset.len() {
        return Err(SliceError::LengthMismatch { what: "projected matrix", expected: dataset.len(), actual: projected.rows() });
    }
    let mut reports = hyps
        .hypotheses
        .par_iter()
        .zip(embeddings.par_iter())
        .map(|(h, e)| {
            let scores = score_hypothesis(projected, e, config.similarity)?;
            slice_report(dataset, h, hyps.class_label, scores, config.tau, config.gap_threshold)
        })
        .collect::<Result<Vec<_>, _>>()?;
    sort_reports(&mut reports);
    Ok(reports)
}

pub fn sort_reports(reports: &mut [SliceReport]) {
    reports.sort_by(|a, b| {
        b.gap
            .total_cmp(&a.gap)
            .then_with(|| a.class_label.cmp(&b.class_label))
            .then_with(|| a.hypothesis_id.cmp(&b.hypothesis_id))
    });
}
