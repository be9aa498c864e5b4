//! Seeded synthetic benchmark with planted spurious directions.
//!
//! The bias lives directly in the vision-language embedding space: each
//! sample is `class_mean(y) + a·bias_strength·v + noise`, where the tag `a`
//! agrees with the class for "aligned" samples. Classifier features are a
//! fixed random linear image of that embedding, predictions are simulated
//! with exact per-cell accuracy quotas, and the text corpus has sentence
//! clusters around ±v so the bias can be traced back to language. Canned LLM
//! responses are keyed by the exact prompts the default pipeline produces.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{save_corpus, save_dataset, CorpusError, EmbeddingMatrix, SampleRecord, Sentence, SliceDataset, Split, TextCorpus};
use crate::fsutil::write_atomic;
use crate::hypothesis::{render_response, Hypothesis, HypothesisSet, LlmClient, LlmProvider, MockEntry, MockProvider};
use crate::metrics::{mean_accuracy, precision_at_k, worst_group_accuracy_multi, GroundTruthSlices, NamedSlice};
use crate::slicer::{LookupEmbedder, SliceConfig, SliceReport};
use crate::mitigator::{mitigate, train_head, MitigationBundle, MitigationConfig, MitigationError, DEFAULT_L2};
use crate::pipeline::{
    class_prompts, evaluate, find_slices, fit_stage, generate_all, predicted_slices, project_dataset, DiscoverConfig, EvalReport,
    PipelineError, DEFAULT_MODALITY, DEFAULT_TASK,
};
use crate::projection::DEFAULT_RIDGE;
use crate::retrieval::DEFAULT_TOP_K_NATURAL;

pub const ALIGNED_TAG: &str = "bias_aligned";
pub const DOMAIN_TAG: &str = "bias_domain";

/// (present-for-odd-classes, present-for-even-classes) phrasing per bias direction.
const BIAS_ATTRIBUTES: [(&str, &str); 2] = [
    ("yellow box left of the red box", "yellow box right of the red box"),
    ("blue background", "green background"),
];
const DISTRACTOR_ATTRIBUTES: [&str; 2] = ["striped texture", "dim lighting"];
const TEMPLATES: [&str; 10] = [
    "a photo with a {}",
    "an image showing a {}",
    "a picture that has a {}",
    "there is a {}",
    "the scene contains a {}",
    "a {} is visible",
    "a rendering with a {}",
    "a frame featuring a {}",
    "a snapshot including a {}",
    "a drawing with a {}",
];
const FILLER_ADJ: [&str; 10] = ["wooden", "shiny", "old", "tiny", "red", "broken", "soft", "metal", "folded", "round"];
const FILLER_NOUN: [&str; 10] = ["chair", "lamp", "cup", "book", "bicycle", "clock", "kite", "basket", "bottle", "hat"];
const FILLER_PLACE: [&str; 10] = [
    "in the kitchen",
    "on a beach",
    "near a window",
    "in a garden",
    "on a desk",
    "at a station",
    "under a tree",
    "in a hallway",
    "on a shelf",
    "by the road",
];
const TEST_SENTENCES_PER_HYPOTHESIS: usize = 5;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    Config(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<CorpusError> for SynthError {
    fn from(e: CorpusError) -> Self {
        SynthError::Pipeline(e.into())
    }
}

impl SynthError {
    pub fn kind(&self) -> &'static str {
        match self {
            SynthError::Config(_) => "ConfigError",
            SynthError::Pipeline(e) => e.kind(),
            SynthError::Io(_) => "IoError",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub d_phi: usize,
    pub d_psi: usize,
    pub n_classes: usize,
    /// Aligned fraction in the training split.
    pub bias_fraction: f64,
    /// Aligned fraction in the validation split; the test split is always 0.5.
    pub val_bias_fraction: f64,
    pub signal_strength: f64,
    /// 0 plants no bias at all (null control).
    pub bias_strength: f64,
    pub noise_sigma: f64,
    pub feature_noise: f64,
    /// 1, or 2 for independent biases on disjoint sample domains.
    pub n_bias_directions: usize,
    pub p_aligned: f64,
    pub p_conflicting: f64,
    pub n_distractor_sentences: usize,
    pub sentences_per_attribute: usize,
    pub text_noise: f64,
    /// Must match the `discover` top-K for the canned responses to apply.
    pub top_k: usize,
    pub task: String,
    pub modality: String,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_train: 4000,
            n_val: 2000,
            n_test: 4000,
            d_phi: 64,
            d_psi: 32,
            n_classes: 2,
            bias_fraction: 0.95,
            val_bias_fraction: 0.5,
            signal_strength: 1.0,
            bias_strength: 1.0,
            noise_sigma: 0.25,
            feature_noise: 0.05,
            n_bias_directions: 1,
            p_aligned: 0.98,
            p_conflicting: 0.55,
            n_distractor_sentences: 200,
            sentences_per_attribute: 10,
            text_noise: 0.1,
            top_k: DEFAULT_TOP_K_NATURAL,
            task: DEFAULT_TASK.to_string(),
            modality: DEFAULT_MODALITY.to_string(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// No planted bias: predictions are equally accurate on every cell.
    pub fn null_bias() -> Self {
        Self { bias_strength: 0.0, ..Self::default() }
    }

    /// Two independent bias directions, each carried by half of the samples,
    /// with a biased validation split. Slices are best cut at a low percentile
    /// because each class has two small conflicting groups.
    pub fn multi_bias() -> Self {
        Self { n_bias_directions: 2, val_bias_fraction: 0.95, signal_strength: 0.5, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Config(m));
        if !(self.bias_fraction > 0.5 && self.bias_fraction <= 1.0) {
            return bad(format!("bias_fraction must lie in (0.5, 1], got {}", self.bias_fraction));
        }
        if !(0.5..=1.0).contains(&self.val_bias_fraction) {
            return bad(format!("val_bias_fraction must lie in [0.5, 1], got {}", self.val_bias_fraction));
        }
        for (name, v) in [("signal_strength", self.signal_strength), ("noise_sigma", self.noise_sigma), ("text_noise", self.text_noise)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.bias_strength >= 0.0 && self.bias_strength.is_finite()) {
            return bad(format!("bias_strength must be non-negative, got {}", self.bias_strength));
        }
        if !(self.feature_noise >= 0.0 && self.feature_noise.is_finite()) {
            return bad(format!("feature_noise must be non-negative, got {}", self.feature_noise));
        }
        if !(1..=2).contains(&self.n_bias_directions) {
            return bad(format!("n_bias_directions must be 1 or 2, got {}", self.n_bias_directions));
        }
        if self.n_classes < 2 {
            return bad("n_classes must be at least 2".into());
        }
        let needed = self.n_classes + self.n_bias_directions + DISTRACTOR_ATTRIBUTES.len();
        if self.d_psi < needed {
            return bad(format!("d_psi must be at least {needed} to hold orthogonal directions"));
        }
        if self.d_phi == 0 {
            return bad("d_phi must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.p_aligned) || !(0.0..=1.0).contains(&self.p_conflicting) {
            return bad("p_aligned and p_conflicting must be probabilities".into());
        }
        if self.p_conflicting > self.p_aligned {
            return bad("p_conflicting must not exceed p_aligned".into());
        }
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return bad("split sizes must be positive".into());
        }
        if self.sentences_per_attribute < TEST_SENTENCES_PER_HYPOTHESIS {
            return bad(format!("sentences_per_attribute must be at least {TEST_SENTENCES_PER_HYPOTHESIS}"));
        }
        if self.top_k == 0 {
            return bad("top_k must be positive".into());
        }
        Ok(())
    }

    /// Accuracy on conflicting samples: interpolates toward p_conflicting as the
    /// bias strength approaches 1.
    pub fn effective_p_conflicting(&self) -> f64 {
        self.p_aligned - (self.p_aligned - self.p_conflicting) * self.bias_strength.min(1.0)
    }

    pub fn group_keys(&self) -> Vec<String> {
        if self.n_bias_directions == 2 {
            vec![DOMAIN_TAG.to_string(), ALIGNED_TAG.to_string()]
        } else {
            vec![ALIGNED_TAG.to_string()]
        }
    }
}

/// Bias tag carried by aligned samples of class `y`.
fn aligned_sign(y: usize, n_classes: usize) -> f64 {
    if n_classes == 2 {
        2.0 * y as f64 - 1.0
    } else if y % 2 == 1 {
        1.0
    } else {
        -1.0
    }
}

fn bias_attribute(k: usize, sign: f64) -> &'static str {
    if sign > 0.0 {
        BIAS_ATTRIBUTES[k].0
    } else {
        BIAS_ATTRIBUTES[k].1
    }
}

fn class_names(n_classes: usize) -> Vec<String> {
    if n_classes == 2 {
        vec!["circle".into(), "square".into()]
    } else {
        (0..n_classes).map(|k| format!("shape {k}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedHypothesis {
    #[serde(rename = "class")]
    pub class_label: usize,
    pub hypothesis_id: String,
    pub attribute: String,
    pub bias_direction: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthBundle {
    pub config: SynthConfig,
    pub train: SliceDataset,
    pub validation: SliceDataset,
    pub test: SliceDataset,
    pub corpus: TextCorpus,
    /// Bias-conflicting members per class of the validation split.
    pub gt_slices: GroundTruthSlices,
    pub gt_slices_test: GroundTruthSlices,
    pub mock_responses: Vec<MockEntry>,
    pub planted: Vec<PlantedHypothesis>,
    pub analytic: BTreeMap<String, f64>,
}

struct Directions {
    class_means: Vec<Vec<f64>>,
    bias: Vec<Vec<f64>>,
    distractors: Vec<Vec<f64>>,
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn directions(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Directions {
    let d = cfg.d_psi;
    let g = DMatrix::from_vec(d, d, normal_vec(rng, d * d));
    let q = g.qr().q();
    let col = |j: usize| -> Vec<f64> { q.column(j).iter().copied().collect() };
    let c = cfg.n_classes;
    let class_means = if c == 2 {
        let u = col(0);
        (0..2).map(|y| u.iter().map(|x| aligned_sign(y, 2) * cfg.signal_strength * x).collect()).collect()
    } else {
        let qs: Vec<Vec<f64>> = (0..c).map(col).collect();
        let centroid: Vec<f64> = (0..d).map(|i| qs.iter().map(|v| v[i]).sum::<f64>() / c as f64).collect();
        qs.iter()
            .map(|v| {
                let e: Vec<f64> = v.iter().zip(&centroid).map(|(a, b)| a - b).collect();
                let n = e.iter().map(|x| x * x).sum::<f64>().sqrt();
                e.iter().map(|x| cfg.signal_strength * x / n).collect()
            })
            .collect()
    };
    let first_bias = if c == 2 { 1 } else { c };
    let bias = (0..cfg.n_bias_directions).map(|k| col(first_bias + k)).collect();
    let distractors = (0..DISTRACTOR_ATTRIBUTES.len()).map(|k| col(first_bias + cfg.n_bias_directions + k)).collect();
    Directions { class_means, bias, distractors }
}

fn to_embeddings(dim: usize, rows: &[Vec<f64>]) -> Result<EmbeddingMatrix, SynthError> {
    Ok(EmbeddingMatrix::from_rows(dim, rows)?)
}

fn generate_split(
    cfg: &SynthConfig,
    dirs: &Directions,
    mixing: &[Vec<f64>],
    split: Split,
    n: usize,
    aligned_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Result<SliceDataset, SynthError> {
    let c = cfg.n_classes;
    let mut psi_rows = Vec::with_capacity(n);
    let mut phi_rows = Vec::with_capacity(n);
    let mut meta = Vec::with_capacity(n);
    for _ in 0..n {
        let y = rng.random_range(0..c);
        let domain = if cfg.n_bias_directions == 2 { rng.random_range(0..2) } else { 0 };
        let aligned = rng.random::<f64>() < aligned_fraction;
        let sign = aligned_sign(y, c);
        let a = if aligned { sign } else { -sign };
        let noise = normal_vec(rng, cfg.d_psi);
        let psi: Vec<f64> = (0..cfg.d_psi)
            .map(|i| dirs.class_means[y][i] + a * cfg.bias_strength * dirs.bias[domain][i] + cfg.noise_sigma * noise[i])
            .collect();
        let fnoise = normal_vec(rng, cfg.d_phi);
        let phi: Vec<f64> = mixing
            .iter()
            .zip(&fnoise)
            .map(|(m, e)| m.iter().zip(&psi).map(|(a, b)| a * b).sum::<f64>() + cfg.feature_noise * e)
            .collect();
        psi_rows.push(psi);
        phi_rows.push(phi);
        meta.push((y, domain, aligned));
    }

    // exact accuracy quotas per (class, domain, aligned) cell
    let mut cells: BTreeMap<(usize, usize, bool), Vec<usize>> = BTreeMap::new();
    for (i, &(y, d, al)) in meta.iter().enumerate() {
        cells.entry((y, d, al)).or_default().push(i);
    }
    let p_conf = cfg.effective_p_conflicting();
    let mut correct = vec![false; n];
    for ((_, _, aligned), members) in &cells {
        let p = if *aligned { cfg.p_aligned } else { p_conf };
        let k = ((p * members.len() as f64).round() as usize).min(members.len());
        for j in sample(rng, members.len(), k) {
            correct[members[j]] = true;
        }
    }
    let samples = meta
        .iter()
        .enumerate()
        .map(|(i, &(y, domain, aligned))| {
            let prediction = if correct[i] {
                y
            } else if c == 2 {
                1 - y
            } else {
                (y + rng.random_range(1..c)) % c
            };
            let mut groups = BTreeMap::new();
            groups.insert(ALIGNED_TAG.to_string(), u8::from(aligned));
            if cfg.n_bias_directions == 2 {
                groups.insert(DOMAIN_TAG.to_string(), domain as u8);
            }
            let name = match split {
                Split::Train => "train",
                Split::Validation => "val",
                Split::Test => "test",
            };
            SampleRecord { id: format!("{name}-{i:05}"), label: y, prediction, score: None, groups }
        })
        .collect();
    let ds = SliceDataset {
        name: "synthbench".into(),
        classes: class_names(c),
        split,
        samples,
        features: to_embeddings(cfg.d_phi, &phi_rows)?,
        vlr_image: Some(to_embeddings(cfg.d_psi, &psi_rows)?),
    };
    ds.validate()?;
    Ok(ds)
}

struct CorpusPlan {
    corpus: TextCorpus,
    /// (bias direction, sign>0) -> sentence texts
    bias_clusters: BTreeMap<(usize, bool), Vec<String>>,
    distractor_clusters: Vec<Vec<String>>,
}

fn attribute_sentences(attr: &str, count: usize) -> Vec<String> {
    (0..count)
        .map(|j| {
            let base = TEMPLATES[j % TEMPLATES.len()].replace("{}", attr);
            if j < TEMPLATES.len() { base } else { format!("{base} (variant {})", j / TEMPLATES.len()) }
        })
        .collect()
}

fn build_corpus(cfg: &SynthConfig, dirs: &Directions, rng: &mut ChaCha8Rng) -> Result<CorpusPlan, SynthError> {
    let mut texts: Vec<String> = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let push_cluster = |texts: &mut Vec<String>, rows: &mut Vec<Vec<f64>>, sentences: &[String], center: &[f64], rng: &mut ChaCha8Rng| {
        for s in sentences {
            let noise = normal_vec(rng, center.len());
            rows.push(center.iter().zip(&noise).map(|(c, e)| c + cfg.text_noise * e).collect());
            texts.push(s.clone());
        }
    };
    let mut bias_clusters = BTreeMap::new();
    for (k, v) in dirs.bias.iter().enumerate() {
        for positive in [true, false] {
            let sign = if positive { 1.0 } else { -1.0 };
            let sentences = attribute_sentences(bias_attribute(k, sign), cfg.sentences_per_attribute);
            let center: Vec<f64> = v.iter().map(|x| sign * x).collect();
            push_cluster(&mut texts, &mut rows, &sentences, &center, rng);
            bias_clusters.insert((k, positive), sentences);
        }
    }
    for (y, name) in class_names(cfg.n_classes).iter().enumerate() {
        let m = &dirs.class_means[y];
        let n = m.iter().map(|x| x * x).sum::<f64>().sqrt();
        let center: Vec<f64> = m.iter().map(|x| x / n).collect();
        let sentences = attribute_sentences(&format!("{name} shape"), cfg.sentences_per_attribute);
        push_cluster(&mut texts, &mut rows, &sentences, &center, rng);
    }
    let mut distractor_clusters = Vec::new();
    for (attr, w) in DISTRACTOR_ATTRIBUTES.iter().zip(&dirs.distractors) {
        let sentences = attribute_sentences(attr, cfg.sentences_per_attribute);
        push_cluster(&mut texts, &mut rows, &sentences, w, rng);
        distractor_clusters.push(sentences);
    }
    for i in 0..cfg.n_distractor_sentences {
        let a = FILLER_ADJ[i % 10];
        let b = FILLER_NOUN[(i / 10) % 10];
        let p = FILLER_PLACE[(i / 100) % 10];
        let text = if i < 1000 { format!("a {a} {b} {p}") } else { format!("a {a} {b} {p} ({})", i / 1000) };
        let v = normal_vec(rng, cfg.d_psi);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        rows.push(v.iter().map(|x| x / n).collect());
        texts.push(text);
    }
    let sentences = texts
        .into_iter()
        .enumerate()
        .map(|(i, text)| Sentence { id: format!("t{i:05}"), text })
        .collect();
    Ok(CorpusPlan {
        corpus: TextCorpus::new(sentences, to_embeddings(cfg.d_psi, &rows)?)?,
        bias_clusters,
        distractor_clusters,
    })
}

fn gt_slices(ds: &SliceDataset) -> GroundTruthSlices {
    GroundTruthSlices {
        slices: (0..ds.n_classes())
            .map(|c| NamedSlice {
                name: format!("c{c}:conflicting"),
                members: ds
                    .samples
                    .iter()
                    .enumerate()
                    .filter(|(_, s)| s.label == c && s.groups.get(ALIGNED_TAG) == Some(&0))
                    .map(|(i, _)| i)
                    .collect(),
            })
            .filter(|s| !s.members.is_empty())
            .collect(),
    }
}

fn statement(attr: &str) -> String {
    format!("The classifier is making mistake as it is biased toward {attr}")
}

pub fn generate(config: &SynthConfig) -> Result<SynthBundle, SynthError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let dirs = directions(config, &mut rng);
    let scale = 1.0 / (config.d_psi as f64).sqrt();
    let mixing: Vec<Vec<f64>> = (0..config.d_phi)
        .map(|_| normal_vec(&mut rng, config.d_psi).into_iter().map(|x| x * scale).collect())
        .collect();
    let train = generate_split(config, &dirs, &mixing, Split::Train, config.n_train, config.bias_fraction, &mut rng)?;
    let validation = generate_split(config, &dirs, &mixing, Split::Validation, config.n_val, config.val_bias_fraction, &mut rng)?;
    let test = generate_split(config, &dirs, &mixing, Split::Test, config.n_test, 0.5, &mut rng)?;
    let plan = build_corpus(config, &dirs, &mut rng)?;

    // canned responses for exactly the prompts the default pipeline builds
    let projector = fit_stage(&train, DEFAULT_RIDGE)?;
    let projected = project_dataset(&projector, &validation)?;
    let discover = DiscoverConfig {
        top_k: config.top_k,
        task: config.task.clone(),
        modality: config.modality.clone(),
        ..DiscoverConfig::default()
    };
    let (prompts, _) = class_prompts(&validation, &projected, &plan.corpus, &discover)?;
    let mut mock_responses = Vec::new();
    let mut planted = Vec::new();
    for p in &prompts {
        let c = p.class_label;
        let sign = aligned_sign(c, config.n_classes);
        let mut hypotheses = Vec::new();
        for k in 0..config.n_bias_directions {
            let attr = bias_attribute(k, sign);
            let id = format!("H{}", hypotheses.len() + 1);
            planted.push(PlantedHypothesis { class_label: c, hypothesis_id: id.clone(), attribute: attr.into(), bias_direction: k });
            hypotheses.push(Hypothesis {
                id,
                attribute: attr.into(),
                statement: statement(attr),
                test_sentences: plan.bias_clusters[&(k, sign > 0.0)][..TEST_SENTENCES_PER_HYPOTHESIS].to_vec(),
            });
        }
        let j = c % DISTRACTOR_ATTRIBUTES.len();
        hypotheses.push(Hypothesis {
            id: format!("H{}", hypotheses.len() + 1),
            attribute: DISTRACTOR_ATTRIBUTES[j].into(),
            statement: statement(DISTRACTOR_ATTRIBUTES[j]),
            test_sentences: plan.distractor_clusters[j][..TEST_SENTENCES_PER_HYPOTHESIS].to_vec(),
        });
        let set = HypothesisSet { class_label: c, raw_response: String::new(), hypotheses };
        let response = format!("Based on the sentences, here are my hypotheses.\n\n```python\n{}```\n", render_response(&set));
        mock_responses.push(MockEntry::for_prompt(&p.prompt, response));
    }

    let p_conf = config.effective_p_conflicting();
    let mut analytic = BTreeMap::new();
    analytic.insert("p_aligned".to_string(), config.p_aligned);
    analytic.insert("p_conflicting".to_string(), p_conf);
    analytic.insert("expected_source_wga".to_string(), config.p_aligned.min(p_conf));
    analytic.insert("expected_source_mean_accuracy_test".to_string(), 0.5 * (config.p_aligned + p_conf));
    analytic.insert("train_bias_fraction".to_string(), config.bias_fraction);
    analytic.insert("val_bias_fraction".to_string(), config.val_bias_fraction);

    Ok(SynthBundle {
        gt_slices: gt_slices(&validation),
        gt_slices_test: gt_slices(&test),
        config: config.clone(),
        train,
        validation,
        test,
        corpus: plan.corpus,
        mock_responses,
        planted,
        analytic,
    })
}

/// Contents of `ground_truth.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthFile {
    pub group_keys: Vec<String>,
    pub planted: Vec<PlantedHypothesis>,
    pub validation: GroundTruthSlices,
    pub test: GroundTruthSlices,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), SynthError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| SynthError::Io(e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes()).map_err(|e| SynthError::Io(format!("{}: {e}", path.display())))
}

impl SynthBundle {
    /// Layout: `{train,validation,test}/manifest.json` (+ tables and
    /// embeddings), `corpus.jsonl`, `corpus.ladremb`, `mock_responses.jsonl`,
    /// `ground_truth.json`, `analytic.json`, `synth_config.json`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), SynthError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| SynthError::Io(e.to_string()))?;
        save_dataset(&self.train, dir.join("train"))?;
        save_dataset(&self.validation, dir.join("validation"))?;
        save_dataset(&self.test, dir.join("test"))?;
        save_corpus(&self.corpus, dir.join("corpus.jsonl"), dir.join("corpus.ladremb"))?;
        let mut mock = String::new();
        for e in &self.mock_responses {
            mock.push_str(&serde_json::to_string(e).map_err(|e| SynthError::Io(e.to_string()))?);
            mock.push('\n');
        }
        write_atomic(&dir.join("mock_responses.jsonl"), mock.as_bytes()).map_err(|e| SynthError::Io(e.to_string()))?;
        write_json(
            &dir.join("ground_truth.json"),
            &GroundTruthFile {
                group_keys: self.config.group_keys(),
                planted: self.planted.clone(),
                validation: self.gt_slices.clone(),
                test: self.gt_slices_test.clone(),
            },
        )?;
        write_json(&dir.join("analytic.json"), &self.analytic)?;
        write_json(&dir.join("synth_config.json"), &self.config)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub slices: GroundTruthSlices,
    pub planted: Vec<PlantedHypothesis>,
    pub group_keys: Vec<String>,
    pub source_wga: f64,
    pub source_worst_cell: String,
    pub source_mean_accuracy: f64,
    pub analytic: BTreeMap<String, f64>,
    /// Head retrained on validation data balanced with the true group tags.
    pub oracle_head_wga: f64,
    pub oracle_head_mean_accuracy: f64,
}

/// Ground-truth quantities: true slices, the simulated predictions' test
/// WGA, and the test WGA of a head trained on truly group-balanced data.
pub fn oracle_report(bundle: &SynthBundle) -> Result<OracleReport, SynthError> {
    let keys = bundle.config.group_keys();
    let key_refs: Vec<&str> = keys.iter().map(String::as_str).collect();
    let test = &bundle.test;
    let source = worst_group_accuracy_multi(test, &test.predictions(), &key_refs).map_err(PipelineError::from)?;
    let source_mean = mean_accuracy(test, &test.predictions()).map_err(PipelineError::from)?;

    let val = &bundle.validation;
    let mut cells: BTreeMap<(usize, Vec<u8>), Vec<usize>> = BTreeMap::new();
    for (i, s) in val.samples.iter().enumerate() {
        let tags = key_refs.iter().map(|k| s.groups.get(*k).copied().unwrap_or(0)).collect();
        cells.entry((s.label, tags)).or_default().push(i);
    }
    let m = cells.values().map(Vec::len).min().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(bundle.config.seed);
    let mut idx: Vec<usize> = cells
        .values()
        .flat_map(|members| sample(&mut rng, members.len(), m).into_iter().map(|j| members[j]).collect::<Vec<_>>())
        .collect();
    idx.sort_unstable();
    let head = train_head("oracle", &val.features.to_matrix(), &val.labels(), &idx, val.n_classes(), DEFAULT_L2)
        .map_err(PipelineError::from)?;
    let pred = head.predict(&test.features.to_matrix());
    let oracle = worst_group_accuracy_multi(test, &pred, &key_refs).map_err(PipelineError::from)?;
    Ok(OracleReport {
        slices: bundle.gt_slices.clone(),
        planted: bundle.planted.clone(),
        group_keys: keys.clone(),
        source_wga: source.worst,
        source_worst_cell: source.worst_cell,
        source_mean_accuracy: source_mean,
        analytic: bundle.analytic.clone(),
        oracle_head_wga: oracle.worst,
        oracle_head_mean_accuracy: mean_accuracy(test, &pred).map_err(PipelineError::from)?,
    })
}

/// Everything one in-memory pass of the pipeline produces on a bundle.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub hypotheses: Vec<HypothesisSet>,
    pub reports: Vec<SliceReport>,
    /// `None` when nothing was flagged.
    pub mitigation: Option<MitigationBundle>,
    /// Slice discovery quality on the validation split.
    pub precision_at_10: f64,
    pub test_eval: Option<EvalReport>,
}

/// fit → discover (mock LLM) → slices → mitigate → eval on test, without
/// touching the filesystem.
pub fn run_pipeline(bundle: &SynthBundle, slices: &SliceConfig, mitigation: &MitigationConfig) -> Result<PipelineRun, SynthError> {
    let projector = fit_stage(&bundle.train, DEFAULT_RIDGE)?;
    let val_proj = project_dataset(&projector, &bundle.validation)?;
    let discover = DiscoverConfig {
        top_k: bundle.config.top_k,
        task: bundle.config.task.clone(),
        modality: bundle.config.modality.clone(),
        similarity: slices.similarity,
        ..DiscoverConfig::default()
    };
    let (prompts, _) = class_prompts(&bundle.validation, &val_proj, &bundle.corpus, &discover)?;
    let client = LlmClient::new(LlmProvider::Mock(MockProvider::from_entries(bundle.mock_responses.clone())))
        .map_err(PipelineError::from)?;
    let hypotheses = generate_all(&prompts, &client, slices.max_hypotheses)?;
    let embedder = LookupEmbedder::new(&bundle.corpus);
    let reports = find_slices(&bundle.validation, &val_proj, &hypotheses, &embedder, slices)?;
    let precision_at_10 = if bundle.gt_slices.slices.is_empty() {
        0.0
    } else {
        precision_at_k(&bundle.gt_slices, &predicted_slices(&reports), 10).map_err(PipelineError::from)?
    };
    let mitigation = match mitigate(&bundle.validation, &val_proj, &reports, &hypotheses, &embedder, mitigation) {
        Ok(m) => m,
        Err(MitigationError::NoErrorSlices) => {
            return Ok(PipelineRun { hypotheses, reports, mitigation: None, precision_at_10, test_eval: None })
        }
        Err(e) => return Err(PipelineError::from(e).into()),
    };
    let test_proj = project_dataset(&projector, &bundle.test)?;
    let keys = bundle.config.group_keys();
    let key_refs: Vec<&str> = keys.iter().map(String::as_str).collect();
    let test_eval = Some(evaluate(&bundle.test, &test_proj, &mitigation, &key_refs)?);
    let mitigation = Some(mitigation);
    Ok(PipelineRun { hypotheses, reports, mitigation, precision_at_10, test_eval })
}
