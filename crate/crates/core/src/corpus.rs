//! On-disk data model and loaders.
//!
//! Embedding file (`.ladremb`), little-endian:
//! - bytes 0..4: ASCII `LADR`
//! - bytes 4..8: format version, u32 (= 1)
//! - bytes 8..16: rows, u64
//! - bytes 16..24: dim, u64
//! - then `rows * dim` f32 values, row-major, no padding or trailing bytes
//!
//! A dataset is a `manifest.json` that points at a `samples.jsonl` table and
//! one or two embedding files. Row `i` of every matrix pairs with line `i` of
//! the table.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fsutil::write_atomic;
use crate::matrix::Matrix;

pub const MAGIC: [u8; 4] = *b"LADR";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 24;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic bytes: expected \"LADR\", found {0:?}")]
    BadMagic(Vec<u8>),
    #[error("unsupported embedding format version {0}")]
    UnsupportedVersion(u32),
    #[error("shape mismatch: expected {expected} bytes/values, found {actual}")]
    ShapeMismatch { expected: u64, actual: u64 },
    #[error("invalid shape: dim must be >= 1 (rows={rows}, dim={dim})")]
    InvalidShape { rows: u64, dim: u64 },
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("{what}: expected {expected} rows, found {actual}")]
    RowCountMismatch {
        what: String,
        expected: usize,
        actual: usize,
    },
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("sample {id:?}: {field} {value} is not a class index in [0, {n_classes})")]
    BadLabel {
        id: String,
        field: &'static str,
        value: i64,
        n_classes: usize,
    },
    #[error("sample {id:?}: score {score} outside [0, 1]")]
    BadScore { id: String, score: f64 },
    #[error("sample {id:?}: group {key:?} has value {value}, expected 0 or 1")]
    BadGroupTag { id: String, key: String, value: i64 },
    #[error("{path}:{line}: {message}")]
    Json {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("dataset has no classes")]
    NoClasses,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Dense row-major f32 matrix, the in-memory mirror of a `.ladremb` file.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(rows: usize, dim: usize, data: Vec<f32>) -> Result<Self, CorpusError> {
        if dim == 0 {
            return Err(CorpusError::InvalidShape {
                rows: rows as u64,
                dim: 0,
            });
        }
        let expected = rows.checked_mul(dim).ok_or(CorpusError::ShapeMismatch {
            expected: u64::MAX,
            actual: data.len() as u64,
        })?;
        if data.len() != expected {
            return Err(CorpusError::ShapeMismatch {
                expected: expected as u64,
                actual: data.len() as u64,
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(CorpusError::NonFinite {
                row: pos / dim,
                col: pos % dim,
            });
        }
        Ok(Self { rows, dim, data })
    }

    /// Builds a matrix from f64 rows, rounding to f32.
    pub fn from_rows<R: AsRef<[f64]>>(dim: usize, rows: &[R]) -> Result<Self, CorpusError> {
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(CorpusError::ShapeMismatch {
                    expected: dim as u64,
                    actual: r.len() as u64,
                });
            }
            data.extend(r.iter().map(|&v| v as f32));
        }
        Self::new(rows.len(), dim, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&v| v as f64).collect()
    }

    /// Widens to an f64 matrix for arithmetic.
    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_vec(
            self.rows,
            self.dim,
            self.data.iter().map(|&v| v as f64).collect(),
        )
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * 4);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.rows as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim as u64).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CorpusError> {
        if bytes.len() < 4 || bytes[..4] != MAGIC {
            return Err(CorpusError::BadMagic(bytes[..bytes.len().min(4)].to_vec()));
        }
        if bytes.len() < HEADER_LEN {
            return Err(CorpusError::ShapeMismatch {
                expected: HEADER_LEN as u64,
                actual: bytes.len() as u64,
            });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(CorpusError::UnsupportedVersion(version));
        }
        let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let dim = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
        if dim == 0 {
            return Err(CorpusError::InvalidShape { rows, dim });
        }
        let payload = &bytes[HEADER_LEN..];
        let expected = rows
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .ok_or(CorpusError::ShapeMismatch {
                expected: u64::MAX,
                actual: payload.len() as u64,
            })?;
        if payload.len() as u64 != expected {
            return Err(CorpusError::ShapeMismatch {
                expected,
                actual: payload.len() as u64,
            });
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(rows as usize, dim as usize, data)
    }
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingMatrix, CorpusError> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(CorpusError::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(io_err(path))?;
    EmbeddingMatrix::decode(&bytes)
}

pub fn save_embeddings(matrix: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<(), CorpusError> {
    let path = path.as_ref();
    write_atomic(path, &matrix.encode()).map_err(io_err(path))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// One line of `samples.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub label: usize,
    pub prediction: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub groups: BTreeMap<String, u8>,
}

impl SampleRecord {
    pub fn is_correct(&self) -> bool {
        self.label == self.prediction
    }
}

// Loose mirror of `SampleRecord` so range violations surface as typed errors
// instead of serde messages.
#[derive(Deserialize)]
struct RawSample {
    id: String,
    label: i64,
    prediction: i64,
    #[serde(default)]
    score: Option<f64>,
    #[serde(default)]
    groups: BTreeMap<String, i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub classes: Vec<String>,
    pub split: Split,
    pub samples: String,
    pub features: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vlr_image: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SliceDataset {
    pub name: String,
    pub classes: Vec<String>,
    pub split: Split,
    pub samples: Vec<SampleRecord>,
    pub features: EmbeddingMatrix,
    pub vlr_image: Option<EmbeddingMatrix>,
}

impl SliceDataset {
    /// Checks every dataset invariant; used by the loader and by in-memory constructors.
    pub fn validate(&self) -> Result<(), CorpusError> {
        let n_classes = self.classes.len();
        if n_classes == 0 {
            return Err(CorpusError::NoClasses);
        }
        if self.features.rows() != self.samples.len() {
            return Err(CorpusError::RowCountMismatch {
                what: "features".into(),
                expected: self.samples.len(),
                actual: self.features.rows(),
            });
        }
        if let Some(vlr) = &self.vlr_image {
            if vlr.rows() != self.samples.len() {
                return Err(CorpusError::RowCountMismatch {
                    what: "vlr_image".into(),
                    expected: self.samples.len(),
                    actual: vlr.rows(),
                });
            }
        }
        let mut seen = HashSet::with_capacity(self.samples.len());
        for s in &self.samples {
            if !seen.insert(s.id.as_str()) {
                return Err(CorpusError::DuplicateId(s.id.clone()));
            }
            for (field, value) in [("label", s.label), ("prediction", s.prediction)] {
                if value >= n_classes {
                    return Err(CorpusError::BadLabel {
                        id: s.id.clone(),
                        field,
                        value: value as i64,
                        n_classes,
                    });
                }
            }
            if let Some(score) = s.score {
                if !(0.0..=1.0).contains(&score) {
                    return Err(CorpusError::BadScore {
                        id: s.id.clone(),
                        score,
                    });
                }
            }
            for (key, &value) in &s.groups {
                if value > 1 {
                    return Err(CorpusError::BadGroupTag {
                        id: s.id.clone(),
                        key: key.clone(),
                        value: value as i64,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn predictions(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.prediction).collect()
    }

    /// Row indices whose label is `class_label`, ascending.
    pub fn class_members(&self, class_label: usize) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.label == class_label)
            .map(|(i, _)| i)
            .collect()
    }
}

fn resolve(base: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn require(path: &Path) -> Result<(), CorpusError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CorpusError::MissingFile(path.to_path_buf()))
    }
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>, CorpusError> {
    require(path)?;
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push((i + 1, line));
    }
    Ok(out)
}

pub fn load_samples(path: impl AsRef<Path>) -> Result<Vec<SampleRecord>, CorpusError> {
    let path = path.as_ref();
    let mut samples = Vec::new();
    for (line_no, line) in read_lines(path)? {
        let raw: RawSample = serde_json::from_str(&line).map_err(|e| CorpusError::Json {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        let check = |field: &'static str, v: i64| {
            if v < 0 {
                Err(CorpusError::BadLabel {
                    id: raw.id.clone(),
                    field,
                    value: v,
                    n_classes: 0,
                })
            } else {
                Ok(v as usize)
            }
        };
        let label = check("label", raw.label)?;
        let prediction = check("prediction", raw.prediction)?;
        let mut groups = BTreeMap::new();
        for (k, v) in raw.groups {
            if !(0..=1).contains(&v) {
                return Err(CorpusError::BadGroupTag {
                    id: raw.id.clone(),
                    key: k,
                    value: v,
                });
            }
            groups.insert(k, v as u8);
        }
        samples.push(SampleRecord {
            id: raw.id,
            label,
            prediction,
            score: raw.score,
            groups,
        });
    }
    Ok(samples)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest, CorpusError> {
    let path = path.as_ref();
    require(path)?;
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| CorpusError::Json {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

/// Loads a manifest and every file it references; relative paths resolve
/// against the manifest's directory.
pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<SliceDataset, CorpusError> {
    let manifest_path = manifest_path.as_ref();
    let manifest = load_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let samples_path = resolve(base, &manifest.samples);
    let features_path = resolve(base, &manifest.features);
    let vlr_path = manifest.vlr_image.as_deref().map(|p| resolve(base, p));
    require(&samples_path)?;
    require(&features_path)?;
    if let Some(p) = &vlr_path {
        require(p)?;
    }
    let dataset = SliceDataset {
        name: manifest.name,
        classes: manifest.classes,
        split: manifest.split,
        samples: load_samples(&samples_path)?,
        features: load_embeddings(&features_path)?,
        vlr_image: vlr_path.map(load_embeddings).transpose()?,
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Writes `manifest.json`, `samples.jsonl`, `features.ladremb` and, when present,
/// `vlr_image.ladremb` into `dir`.
pub fn save_dataset(dataset: &SliceDataset, dir: impl AsRef<Path>) -> Result<PathBuf, CorpusError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let manifest = Manifest {
        name: dataset.name.clone(),
        classes: dataset.classes.clone(),
        split: dataset.split,
        samples: "samples.jsonl".into(),
        features: "features.ladremb".into(),
        vlr_image: dataset.vlr_image.as_ref().map(|_| "vlr_image.ladremb".into()),
    };
    let mut lines = String::new();
    for s in &dataset.samples {
        lines.push_str(&serde_json::to_string(s).expect("sample serializes"));
        lines.push('\n');
    }
    let samples_path = dir.join("samples.jsonl");
    write_atomic(&samples_path, lines.as_bytes()).map_err(io_err(&samples_path))?;
    save_embeddings(&dataset.features, dir.join("features.ladremb"))?;
    if let Some(vlr) = &dataset.vlr_image {
        save_embeddings(vlr, dir.join("vlr_image.ladremb"))?;
    }
    let manifest_path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_atomic(&manifest_path, json.as_bytes()).map_err(io_err(&manifest_path))?;
    Ok(manifest_path)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub id: String,
    pub text: String,
}

/// Sentences paired positionally with their text embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct TextCorpus {
    pub sentences: Vec<Sentence>,
    pub embeddings: EmbeddingMatrix,
}

impl TextCorpus {
    pub fn new(sentences: Vec<Sentence>, embeddings: EmbeddingMatrix) -> Result<Self, CorpusError> {
        let corpus = Self {
            sentences,
            embeddings,
        };
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.sentences.len() != self.embeddings.rows() {
            return Err(CorpusError::RowCountMismatch {
                what: "corpus embeddings".into(),
                expected: self.sentences.len(),
                actual: self.embeddings.rows(),
            });
        }
        let mut seen = HashSet::with_capacity(self.sentences.len());
        for s in &self.sentences {
            if !seen.insert(s.id.as_str()) {
                return Err(CorpusError::DuplicateId(s.id.clone()));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }
}

pub fn load_corpus(
    jsonl_path: impl AsRef<Path>,
    embeddings_path: impl AsRef<Path>,
) -> Result<TextCorpus, CorpusError> {
    let path = jsonl_path.as_ref();
    let mut sentences = Vec::new();
    for (line_no, line) in read_lines(path)? {
        let s: Sentence = serde_json::from_str(&line).map_err(|e| CorpusError::Json {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        sentences.push(s);
    }
    TextCorpus::new(sentences, load_embeddings(embeddings_path)?)
}

pub fn save_corpus(
    corpus: &TextCorpus,
    jsonl_path: impl AsRef<Path>,
    embeddings_path: impl AsRef<Path>,
) -> Result<(), CorpusError> {
    let path = jsonl_path.as_ref();
    let mut lines = String::new();
    for s in &corpus.sentences {
        lines.push_str(&serde_json::to_string(s).expect("sentence serializes"));
        lines.push('\n');
    }
    write_atomic(path, lines.as_bytes()).map_err(io_err(path))?;
    save_embeddings(&corpus.embeddings, embeddings_path)
}
