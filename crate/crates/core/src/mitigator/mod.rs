//! Annotation-free mitigation: hypothesis scores become pseudo attribute
//! labels, each flagged hypothesis gets a head retrained on a group-balanced
//! subset of the validation split, and inference routes every sample to the
//! head of its most similar hypothesis.

mod logistic;

use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use logistic::{train_head, LinearHead, DEFAULT_L2, GRAD_TOLERANCE, MAX_ITERATIONS};

use crate::corpus::{load_embeddings, save_embeddings, CorpusError, EmbeddingMatrix, SliceDataset};
use crate::fsutil::write_atomic;
use crate::hypothesis::HypothesisSet;
use crate::matrix::{dot, Matrix};
use crate::retrieval::Similarity;
use crate::slicer::{hypothesis_embedding, score_hypothesis, EmbeddingProvider, HypothesisEmbedding, SliceError, SliceReport};

#[derive(Debug, Error)]
pub enum MitigationError {
    #[error("scores have zero variance; the hypothesis separates nothing")]
    DegenerateScores,
    #[error("score list is empty")]
    EmptyScores,
    #[error("length mismatch: expected {expected}, found {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("cell (class {class_label}, attribute {attribute}) is empty")]
    EmptyCell { class_label: usize, attribute: u8 },
    #[error("training index set is empty")]
    EmptyTrainingSet,
    #[error("all selected samples have label {0}")]
    SingleClassSet(usize),
    #[error("l2 must be finite and non-negative, got {0}")]
    InvalidL2(f64),
    #[error("label {0} is outside the class range")]
    BadLabel(usize),
    #[error("no error slice was flagged; nothing to mitigate")]
    NoErrorSlices,
    #[error("every flagged hypothesis was skipped: {}", .0.join("; "))]
    AllSkipped(Vec<String>),
    #[error("bundle has no heads")]
    EmptyBundle,
    #[error("flagged hypothesis {0} is missing from the hypothesis sets")]
    UnknownHypothesis(String),
    #[error("bundle metadata: {0}")]
    Metadata(String),
    #[error(transparent)]
    Slice(#[from] SliceError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CalibrationMode {
    /// Standardize over the class's validation scores.
    #[default]
    Zscore,
    /// Use s_H as the logit unchanged.
    Raw,
}

impl std::str::FromStr for CalibrationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "zscore" => Ok(CalibrationMode::Zscore),
            "raw" => Ok(CalibrationMode::Raw),
            other => Err(format!("unknown calibration mode {other:?} (expected zscore|raw)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub mean: f64,
    pub std: f64,
    pub mode: CalibrationMode,
}

impl Calibration {
    /// Population mean and standard deviation of `scores`.
    pub fn fit(scores: &[f64], mode: CalibrationMode) -> Result<Self, MitigationError> {
        if scores.is_empty() {
            return Err(MitigationError::EmptyScores);
        }
        if mode == CalibrationMode::Raw {
            return Ok(Self { mean: 0.0, std: 1.0, mode });
        }
        let n = scores.len() as f64;
        let mean = scores.iter().sum::<f64>() / n;
        let std = (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n).sqrt();
        if !(std > 0.0) || !std.is_finite() {
            return Err(MitigationError::DegenerateScores);
        }
        Ok(Self { mean, std, mode })
    }

    pub fn apply(&self, score: f64) -> f64 {
        match self.mode {
            CalibrationMode::Raw => score,
            CalibrationMode::Zscore => (score - self.mean) / self.std,
        }
    }
}

/// 1 iff sigmoid(calibrated score) > 0.5, i.e. calibrated score > 0.
pub fn pseudo_label(scores: &[f64], calib: &Calibration) -> Result<Vec<u8>, MitigationError> {
    if scores.is_empty() {
        return Err(MitigationError::EmptyScores);
    }
    if calib.mode == CalibrationMode::Zscore && !(calib.std > 0.0) {
        return Err(MitigationError::DegenerateScores);
    }
    Ok(scores.iter().map(|&s| u8::from(calib.apply(s) > 0.0)).collect())
}

/// Subsamples every (label, pseudo) cell down to the smallest cell size.
/// Indices come back in ascending order.
pub fn balance_groups(dataset: &SliceDataset, pseudo: &[u8], seed: u64) -> Result<Vec<usize>, MitigationError> {
    if pseudo.len() != dataset.len() {
        return Err(MitigationError::LengthMismatch { expected: dataset.len(), actual: pseudo.len() });
    }
    let mut cells: Vec<Vec<usize>> = vec![Vec::new(); dataset.n_classes() * 2];
    for (i, s) in dataset.samples.iter().enumerate() {
        cells[s.label * 2 + usize::from(pseudo[i] != 0)].push(i);
    }
    if let Some(empty) = cells.iter().position(Vec::is_empty) {
        return Err(MitigationError::EmptyCell { class_label: empty / 2, attribute: (empty % 2) as u8 });
    }
    let target = cells.iter().map(Vec::len).min().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(target * cells.len());
    for cell in &cells {
        if cell.len() == target {
            out.extend_from_slice(cell);
        } else {
            out.extend(sample(&mut rng, cell.len(), target).into_iter().map(|k| cell[k]));
        }
    }
    out.sort_unstable();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MitigationConfig {
    pub similarity: Similarity,
    pub calibration: CalibrationMode,
    pub l2: f64,
    pub seed: u64,
}

impl Default for MitigationConfig {
    fn default() -> Self {
        Self {
            similarity: Similarity::Cosine,
            calibration: CalibrationMode::Zscore,
            l2: DEFAULT_L2,
            seed: 0,
        }
    }
}

/// One retrained head with everything needed to route to it.
#[derive(Debug, Clone, PartialEq)]
pub struct BundleHead {
    /// `c<class>:<id>`, unique across classes.
    pub hypothesis_id: String,
    pub class_label: usize,
    pub attribute: String,
    pub calibration: Calibration,
    pub embedding: HypothesisEmbedding,
    pub head: LinearHead,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MitigationBundle {
    pub similarity: Similarity,
    pub n_classes: usize,
    pub heads: Vec<BundleHead>,
    pub erm_head: LinearHead,
    pub warnings: Vec<String>,
}

pub fn qualified_id(class_label: usize, id: &str) -> String {
    format!("c{class_label}:{id}")
}

/// Retrains one head per flagged hypothesis plus an ERM control head on the
/// whole validation split. Hypotheses whose cells cannot be balanced, or whose
/// scores are constant, are skipped with a warning.
pub fn mitigate(
    dataset: &SliceDataset,
    projected: &Matrix,
    reports: &[SliceReport],
    hyp_sets: &[HypothesisSet],
    embedder: &dyn EmbeddingProvider,
    config: &MitigationConfig,
) -> Result<MitigationBundle, MitigationError> {
    if projected.rows() != dataset.len() {
        return Err(MitigationError::LengthMismatch { expected: dataset.len(), actual: projected.rows() });
    }
    let flagged: Vec<&SliceReport> = reports.iter().filter(|r| r.is_error_slice).collect();
    if flagged.is_empty() {
        return Err(MitigationError::NoErrorSlices);
    }
    // hypothesis-set order, so the bundle layout does not depend on gap ranking
    let mut jobs = Vec::new();
    for set in hyp_sets {
        for h in &set.hypotheses {
            if flagged.iter().any(|r| r.class_label == set.class_label && r.hypothesis_id == h.id) {
                jobs.push((set.class_label, h));
            }
        }
    }
    for r in &flagged {
        if !jobs.iter().any(|(c, h)| *c == r.class_label && h.id == r.hypothesis_id) {
            return Err(MitigationError::UnknownHypothesis(qualified_id(r.class_label, &r.hypothesis_id)));
        }
    }

    let features = dataset.features.to_matrix();
    let labels = dataset.labels();
    let n_classes = dataset.n_classes();
    let outcomes: Vec<Result<BundleHead, MitigationError>> = jobs
        .par_iter()
        .enumerate()
        .map(|(k, (class_label, h))| {
            let id = qualified_id(*class_label, &h.id);
            let mut embedding = hypothesis_embedding(h, embedder, config.similarity)?;
            embedding.hypothesis_id = id.clone();
            let scores = score_hypothesis(projected, &embedding, config.similarity)?;
            let class_scores: Vec<f64> = dataset.class_members(*class_label).iter().map(|&i| scores[i]).collect();
            let calibration = Calibration::fit(&class_scores, config.calibration)?;
            let pseudo = pseudo_label(&scores, &calibration)?;
            let idx = balance_groups(dataset, &pseudo, config.seed.wrapping_add(k as u64))?;
            let head = train_head(&id, &features, &labels, &idx, n_classes, config.l2)?;
            Ok(BundleHead {
                hypothesis_id: id,
                class_label: *class_label,
                attribute: h.attribute.clone(),
                calibration,
                embedding,
                head,
            })
        })
        .collect();

    let mut heads = Vec::new();
    let mut warnings = Vec::new();
    for ((class_label, h), outcome) in jobs.iter().zip(outcomes) {
        match outcome {
            Ok(head) => heads.push(head),
            Err(e @ (MitigationError::EmptyCell { .. } | MitigationError::DegenerateScores)) => {
                let msg = format!("skipped {}: {e}", qualified_id(*class_label, &h.id));
                log::warn!("{msg}");
                warnings.push(msg);
            }
            Err(e) => return Err(e),
        }
    }
    if heads.is_empty() {
        return Err(MitigationError::AllSkipped(warnings));
    }
    let all: Vec<usize> = (0..dataset.len()).collect();
    let erm_head = train_head("erm", &features, &labels, &all, n_classes, config.l2)?;
    Ok(MitigationBundle { similarity: config.similarity, n_classes, heads, erm_head, warnings })
}

/// Index of the head whose hypothesis is most similar to the sample; exact
/// ties go to the lexicographically smallest hypothesis id.
pub fn route(projected_row: &[f64], bundle: &MitigationBundle) -> Result<usize, MitigationError> {
    if bundle.heads.is_empty() {
        return Err(MitigationError::EmptyBundle);
    }
    let x = bundle.similarity.prepare(projected_row);
    let mut best = 0;
    let mut best_sim = f64::NEG_INFINITY;
    for (k, h) in bundle.heads.iter().enumerate() {
        let sim = dot(&x, &bundle.similarity.prepare(&h.embedding.vector));
        if sim > best_sim || (sim == best_sim && h.hypothesis_id < bundle.heads[best].hypothesis_id) {
            best = k;
            best_sim = sim;
        }
    }
    Ok(best)
}

pub fn ensemble_predict(
    features_row: &[f64],
    projected_row: &[f64],
    bundle: &MitigationBundle,
) -> Result<usize, MitigationError> {
    let k = route(projected_row, bundle)?;
    Ok(bundle.heads[k].head.predict_row(features_row))
}

pub fn ensemble_predict_all(
    features: &Matrix,
    projected: &Matrix,
    bundle: &MitigationBundle,
) -> Result<Vec<usize>, MitigationError> {
    if features.rows() != projected.rows() {
        return Err(MitigationError::LengthMismatch { expected: features.rows(), actual: projected.rows() });
    }
    (0..features.rows())
        .into_par_iter()
        .map(|i| ensemble_predict(features.row(i), projected.row(i), bundle))
        .collect()
}

// ---- persistence ----

#[derive(Serialize, Deserialize)]
struct HeadRecord {
    hypothesis_id: String,
    l2: f64,
    train_loss: f64,
    n_train: usize,
    iterations: usize,
    weights: String,
    bias: String,
}

#[derive(Serialize, Deserialize)]
struct BundleHeadRecord {
    #[serde(rename = "class")]
    class_label: usize,
    attribute: String,
    calibration: Calibration,
    embedding: Vec<f64>,
    n_sentences: usize,
    head: HeadRecord,
}

#[derive(Serialize, Deserialize)]
struct BundleRecord {
    similarity: Similarity,
    n_classes: usize,
    heads: Vec<BundleHeadRecord>,
    erm: HeadRecord,
    warnings: Vec<String>,
}

fn meta<E: std::fmt::Display>(e: E) -> MitigationError {
    MitigationError::Metadata(e.to_string())
}

fn save_head(head: &LinearHead, dir: &Path, stem: &str) -> Result<HeadRecord, MitigationError> {
    let c = head.n_classes();
    let w = EmbeddingMatrix::from_rows(c, &(0..head.weights.rows()).map(|j| head.weights.row(j)).collect::<Vec<_>>())?;
    let b = EmbeddingMatrix::from_rows(c, &[head.bias.as_slice()])?;
    let weights = format!("heads/{stem}_W.ladremb");
    let bias = format!("heads/{stem}_b.ladremb");
    save_embeddings(&w, dir.join(&weights))?;
    save_embeddings(&b, dir.join(&bias))?;
    Ok(HeadRecord {
        hypothesis_id: head.hypothesis_id.clone(),
        l2: head.l2,
        train_loss: head.train_loss,
        n_train: head.n_train,
        iterations: head.iterations,
        weights,
        bias,
    })
}

fn load_head(rec: &HeadRecord, dir: &Path) -> Result<LinearHead, MitigationError> {
    let w = load_embeddings(dir.join(&rec.weights))?;
    let b = load_embeddings(dir.join(&rec.bias))?;
    if b.rows() != 1 || b.dim() != w.dim() {
        return Err(meta(format!("head {} has inconsistent weight/bias shapes", rec.hypothesis_id)));
    }
    Ok(LinearHead {
        hypothesis_id: rec.hypothesis_id.clone(),
        weights: w.to_matrix(),
        bias: b.row_f64(0),
        l2: rec.l2,
        train_loss: rec.train_loss,
        n_train: rec.n_train,
        iterations: rec.iterations,
    })
}

impl MitigationBundle {
    /// Writes `bundle.json` plus per-head weight files under `heads/`.
    /// Head weights are stored at f32 precision; embeddings and calibrations
    /// stay exact in the JSON.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), MitigationError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir.join("heads")).map_err(meta)?;
        let heads = self
            .heads
            .iter()
            .enumerate()
            .map(|(k, h)| {
                Ok(BundleHeadRecord {
                    class_label: h.class_label,
                    attribute: h.attribute.clone(),
                    calibration: h.calibration,
                    embedding: h.embedding.vector.clone(),
                    n_sentences: h.embedding.n_sentences,
                    head: save_head(&h.head, dir, &format!("{k:02}"))?,
                })
            })
            .collect::<Result<Vec<_>, MitigationError>>()?;
        let record = BundleRecord {
            similarity: self.similarity,
            n_classes: self.n_classes,
            heads,
            erm: save_head(&self.erm_head, dir, "erm")?,
            warnings: self.warnings.clone(),
        };
        let json = serde_json::to_string_pretty(&record).map_err(meta)?;
        write_atomic(&dir.join("bundle.json"), json.as_bytes()).map_err(meta)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, MitigationError> {
        let dir = dir.as_ref();
        let path = dir.join("bundle.json");
        if !path.exists() {
            return Err(CorpusError::MissingFile(path).into());
        }
        let record: BundleRecord = serde_json::from_str(&fs::read_to_string(&path).map_err(meta)?).map_err(meta)?;
        let heads = record
            .heads
            .iter()
            .map(|r| {
                Ok(BundleHead {
                    hypothesis_id: r.head.hypothesis_id.clone(),
                    class_label: r.class_label,
                    attribute: r.attribute.clone(),
                    calibration: r.calibration,
                    embedding: HypothesisEmbedding {
                        hypothesis_id: r.head.hypothesis_id.clone(),
                        vector: r.embedding.clone(),
                        n_sentences: r.n_sentences,
                    },
                    head: load_head(&r.head, dir)?,
                })
            })
            .collect::<Result<Vec<_>, MitigationError>>()?;
        Ok(Self {
            similarity: record.similarity,
            n_classes: record.n_classes,
            heads,
            erm_head: load_head(&record.erm, dir)?,
            warnings: record.warnings,
        })
    }
}
