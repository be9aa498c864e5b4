use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ladder_core::artifacts::{read_ground_truth, read_json, write_json, write_text, DiscoverIndex, EvalEcho, MetricsFile, SlicesFile};
use ladder_core::corpus::{load_corpus, load_dataset, SliceDataset, TextCorpus};
use ladder_core::hypothesis::{HttpRetryPolicy, HypothesisSet, LlmClient, LlmProvider, LlmRequest, MockProvider};
use ladder_core::metrics::precision_at_k;
use ladder_core::mitigator::{mitigate as run_mitigation, CalibrationMode, MitigationBundle, MitigationConfig};
use ladder_core::pipeline::{
    class_prompts, common_group_keys, evaluate, find_slices, fit_stage, generate_all, predicted_slices, project_dataset, DiscoverConfig,
};
use ladder_core::projection::AffineProjector;
use ladder_core::retrieval::{Similarity, DEFAULT_TOP_K_MEDICAL, DEFAULT_TOP_K_NATURAL};
use ladder_core::slicer::{EmbeddingProvider, LookupEmbedder, RemoteEmbedder, SliceConfig, TauPolicy};
use ladder_core::synthbench::{generate, oracle_report, SynthConfig};
use serde_json::json;

use crate::{CliError, CorpusArgs, EmbedderArgs, EmbedderKind, ProviderArgs, ProviderKind, SynthPreset};

pub const PROJECTOR_DIR: &str = "projector";
pub const DISCOVER_DIR: &str = "discover";
pub const SLICES_FILE: &str = "slices.json";
pub const BUNDLE_DIR: &str = "bundle";
pub const METRICS_FILE: &str = "metrics.json";

fn missing(what: &str, path: &Path, hint: &str) -> CliError {
    CliError::new("MissingInput", format!("{what} not found at {}; {hint}", path.display()))
}

/// Accepts a manifest file or the directory holding `manifest.json`.
fn load_split(path: &Path) -> Result<SliceDataset, CliError> {
    let manifest = if path.is_dir() { path.join("manifest.json") } else { path.to_path_buf() };
    if !manifest.exists() {
        return Err(missing("dataset manifest", &manifest, "pass a manifest.json or its directory"));
    }
    Ok(load_dataset(&manifest)?)
}

fn load_text_corpus(args: &CorpusArgs) -> Result<TextCorpus, CliError> {
    Ok(load_corpus(&args.corpus, args.embeddings_path())?)
}

fn load_projector(out: &Path) -> Result<AffineProjector, CliError> {
    let dir = out.join(PROJECTOR_DIR);
    if !dir.join("projector.json").exists() {
        return Err(missing("projector", &dir, "run `ladder fit-projection` first"));
    }
    Ok(AffineProjector::load(&dir)?)
}

fn load_discover(out: &Path) -> Result<(DiscoverIndex, Vec<HypothesisSet>), CliError> {
    let dir = out.join(DISCOVER_DIR);
    let index_path = dir.join("discover.json");
    if !index_path.exists() {
        return Err(missing("discover output", &dir, "run `ladder discover` first"));
    }
    let index: DiscoverIndex = read_json(&index_path)?;
    let sets = index
        .classes
        .iter()
        .map(|&c| read_json::<HypothesisSet>(&dir.join(DiscoverIndex::hypotheses_file(c))))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((index, sets))
}

fn load_slices(out: &Path) -> Result<SlicesFile, CliError> {
    let path = out.join(SLICES_FILE);
    if !path.exists() {
        return Err(missing("slices.json", &path, "run `ladder slices` first"));
    }
    Ok(read_json(&path)?)
}

fn build_embedder<'a>(args: &EmbedderArgs, corpus: &'a TextCorpus) -> Result<Box<dyn EmbeddingProvider + 'a>, CliError> {
    Ok(match args.embedder {
        EmbedderKind::Lookup => Box::new(LookupEmbedder::new(corpus)),
        EmbedderKind::Remote => {
            let endpoint = args.embed_endpoint.clone().ok_or_else(|| CliError::new("ConfigError", "--embedder remote needs --embed-endpoint"))?;
            Box::new(RemoteEmbedder {
                endpoint,
                model: args.embed_model.clone().unwrap_or_default(),
                api_key_env: args.embed_api_key_env.clone(),
                ..RemoteEmbedder::default()
            })
        }
    })
}

fn build_client(args: &ProviderArgs) -> Result<(LlmClient, String), CliError> {
    match args.provider {
        ProviderKind::Mock => {
            let path = args
                .mock_responses
                .as_ref()
                .ok_or_else(|| CliError::new("ConfigError", "--provider mock needs --mock-responses"))?;
            if !path.exists() {
                return Err(missing("mock responses", path, "generate them with `ladder synth` or write them by hand"));
            }
            Ok((LlmClient::new(LlmProvider::Mock(MockProvider::load(path)?))?, "mock".into()))
        }
        ProviderKind::Http => {
            let req = LlmRequest {
                endpoint: args.endpoint.clone().unwrap_or_default(),
                model: args.model.clone().unwrap_or_default(),
                temperature: args.temperature,
                max_tokens: args.max_tokens,
                api_key_env: args.api_key_env.clone(),
                timeout_secs: args.timeout_secs,
                retry: HttpRetryPolicy { max_retries: args.max_retries, ..HttpRetryPolicy::default() },
                ..LlmRequest::default()
            };
            let name = format!("http:{}", req.model);
            Ok((LlmClient::new(LlmProvider::Http(req))?, name))
        }
    }
}

pub fn fit_projection(train: &Path, out: &Path, ridge: f64) -> Result<serde_json::Value, CliError> {
    let ds = load_split(train)?;
    let projector = fit_stage(&ds, ridge)?;
    projector.save(out.join(PROJECTOR_DIR))?;
    Ok(json!({
        "stage": "fit-projection",
        "d_phi": projector.d_phi(),
        "d_psi": projector.d_psi(),
        "fit_rmse": projector.fit_rmse,
    }))
}

pub struct DiscoverOptions<'a> {
    pub val: &'a Path,
    pub corpus: &'a CorpusArgs,
    pub out: &'a Path,
    pub top_k: Option<usize>,
    pub similarity: Similarity,
    pub task: &'a str,
    pub modality: &'a str,
    pub medical: bool,
    pub max_hypotheses: usize,
    pub provider: &'a ProviderArgs,
}

pub fn discover(o: &DiscoverOptions) -> Result<serde_json::Value, CliError> {
    let projector = load_projector(o.out)?;
    let ds = load_split(o.val)?;
    let corpus = load_text_corpus(o.corpus)?;
    let (client, provider) = build_client(o.provider)?;
    let config = DiscoverConfig {
        top_k: o.top_k.unwrap_or(if o.medical { DEFAULT_TOP_K_MEDICAL } else { DEFAULT_TOP_K_NATURAL }),
        similarity: o.similarity,
        task: o.task.to_string(),
        modality: o.modality.to_string(),
        medical: o.medical,
        max_hypotheses: o.max_hypotheses,
    };
    let projected = project_dataset(&projector, &ds)?;
    let (prompts, warnings) = class_prompts(&ds, &projected, &corpus, &config)?;
    let sets = generate_all(&prompts, &client, config.max_hypotheses)?;

    let dir = o.out.join(DISCOVER_DIR);
    for (p, set) in prompts.iter().zip(&sets) {
        write_json(&dir.join(DiscoverIndex::topk_file(p.class_label)), &p.topk)?;
        write_text(&dir.join(DiscoverIndex::prompt_file(p.class_label)), &p.prompt)?;
        write_json(&dir.join(DiscoverIndex::hypotheses_file(p.class_label)), set)?;
    }
    let index = DiscoverIndex {
        dataset: ds.name.clone(),
        class_names: ds.classes.clone(),
        classes: prompts.iter().map(|p| p.class_label).collect(),
        top_k: config.top_k,
        similarity: config.similarity,
        task: config.task,
        modality: config.modality,
        medical: config.medical,
        provider,
        warnings,
    };
    write_json(&dir.join("discover.json"), &index)?;
    Ok(json!({
        "stage": "discover",
        "classes": index.classes,
        "hypotheses": sets.iter().map(|s| s.hypotheses.len()).sum::<usize>(),
        "warnings": index.warnings,
    }))
}

pub struct SlicesOptions<'a> {
    pub val: &'a Path,
    pub corpus: &'a CorpusArgs,
    pub out: &'a Path,
    pub similarity: Option<Similarity>,
    pub tau: TauPolicy,
    pub gap_threshold: f64,
    pub max_hypotheses: usize,
    pub dump_scores: bool,
    pub embedder: &'a EmbedderArgs,
}

pub fn slices(o: &SlicesOptions) -> Result<serde_json::Value, CliError> {
    let (index, sets) = load_discover(o.out)?;
    let projector = load_projector(o.out)?;
    let ds = load_split(o.val)?;
    let corpus = load_text_corpus(o.corpus)?;
    let embedder = build_embedder(o.embedder, &corpus)?;
    if !(o.gap_threshold.is_finite()) {
        return Err(CliError::new("ConfigError", "--gap-threshold must be finite"));
    }
    let config = SliceConfig {
        similarity: o.similarity.unwrap_or(index.similarity),
        tau: o.tau,
        gap_threshold: o.gap_threshold,
        max_hypotheses: o.max_hypotheses,
    };
    let projected = project_dataset(&projector, &ds)?;
    let mut reports = find_slices(&ds, &projected, &sets, embedder.as_ref(), &config)?;
    if !o.dump_scores {
        reports.iter_mut().for_each(|r| r.scores = None);
    }
    let file = SlicesFile {
        dataset: ds.name.clone(),
        class_names: ds.classes.clone(),
        similarity: config.similarity,
        tau: config.tau,
        gap_threshold: config.gap_threshold,
        n_hypotheses: reports.len(),
        reports,
    };
    write_json(&o.out.join(SLICES_FILE), &file)?;
    let flagged: Vec<String> = file
        .reports
        .iter()
        .filter(|r| r.is_error_slice)
        .map(|r| format!("c{}:{}", r.class_label, r.hypothesis_id))
        .collect();
    Ok(json!({"stage": "slices", "hypotheses": file.n_hypotheses, "flagged": flagged}))
}

pub struct MitigateOptions<'a> {
    pub val: &'a Path,
    pub corpus: &'a CorpusArgs,
    pub out: &'a Path,
    pub calibration: CalibrationMode,
    pub l2: f64,
    pub seed: u64,
    pub embedder: &'a EmbedderArgs,
}

pub fn mitigate(o: &MitigateOptions) -> Result<serde_json::Value, CliError> {
    let slices = load_slices(o.out)?;
    let (_, sets) = load_discover(o.out)?;
    let projector = load_projector(o.out)?;
    let ds = load_split(o.val)?;
    let corpus = load_text_corpus(o.corpus)?;
    let embedder = build_embedder(o.embedder, &corpus)?;
    let config = MitigationConfig { similarity: slices.similarity, calibration: o.calibration, l2: o.l2, seed: o.seed };
    let projected = project_dataset(&projector, &ds)?;
    let bundle = run_mitigation(&ds, &projected, &slices.reports, &sets, embedder.as_ref(), &config)?;
    bundle.save(o.out.join(BUNDLE_DIR))?;
    Ok(json!({
        "stage": "mitigate",
        "heads": bundle.heads.iter().map(|h| h.hypothesis_id.clone()).collect::<Vec<_>>(),
        "warnings": bundle.warnings,
    }))
}

pub fn eval(
    data: &Path,
    out: &Path,
    group_keys: &[String],
    ground_truth: Option<&Path>,
    gt_split: &str,
    ks: &[usize],
) -> Result<serde_json::Value, CliError> {
    let projector = load_projector(out)?;
    let bundle_dir = out.join(BUNDLE_DIR);
    if !bundle_dir.join("bundle.json").exists() {
        return Err(missing("mitigation bundle", &bundle_dir, "run `ladder mitigate` first"));
    }
    let bundle = MitigationBundle::load(&bundle_dir)?;
    let ds = load_split(data)?;
    let keys: Vec<String> = if group_keys.is_empty() { common_group_keys(&ds) } else { group_keys.to_vec() };
    let key_refs: Vec<&str> = keys.iter().map(String::as_str).collect();
    let projected = project_dataset(&projector, &ds)?;
    let report = evaluate(&ds, &projected, &bundle, &key_refs)?;

    let mut precision = BTreeMap::new();
    if let Some(gt_path) = ground_truth {
        let slices = load_slices(out)?;
        let gt = read_ground_truth(gt_path, gt_split)?;
        let predicted = predicted_slices(&slices.reports);
        for &k in ks {
            precision.insert(k.to_string(), precision_at_k(&gt, &predicted, k)?);
        }
    }
    let file = MetricsFile {
        config: EvalEcho {
            similarity: bundle.similarity,
            n_heads: bundle.heads.len(),
            k: if ground_truth.is_some() { ks.to_vec() } else { Vec::new() },
            ground_truth_split: ground_truth.map(|_| gt_split.to_string()),
        },
        eval: report,
        precision_at_k: precision,
    };
    write_json(&out.join(METRICS_FILE), &file)?;
    let wga = |m: &ladder_core::pipeline::ModelMetrics| m.wga.as_ref().map(|g| g.worst);
    Ok(json!({
        "stage": "eval",
        "source": {"mean_accuracy": file.eval.source.mean_accuracy, "wga": wga(&file.eval.source)},
        "erm_head": {"mean_accuracy": file.eval.erm_head.mean_accuracy, "wga": wga(&file.eval.erm_head)},
        "ensemble": {"mean_accuracy": file.eval.ensemble.mean_accuracy, "wga": wga(&file.eval.ensemble)},
        "precision_at_k": file.precision_at_k,
    }))
}

pub fn synth(config: Option<&Path>, preset: SynthPreset, seed: Option<u64>, out: &Path) -> Result<serde_json::Value, CliError> {
    let base = match preset {
        SynthPreset::Default => SynthConfig::default(),
        SynthPreset::NullBias => SynthConfig::null_bias(),
        SynthPreset::MultiBias => SynthConfig::multi_bias(),
    };
    let mut cfg = match config {
        None => base,
        Some(path) => {
            // file values override the preset field by field
            let file: serde_json::Value = read_json(path)?;
            let mut merged = serde_json::to_value(&base).expect("config serializes");
            let serde_json::Value::Object(fields) = file else {
                return Err(CliError::new("ParseError", format!("{}: expected a JSON object", path.display())));
            };
            for (k, v) in fields {
                merged[k] = v;
            }
            serde_json::from_value(merged).map_err(|e| CliError::new("ParseError", format!("{}: {e}", path.display())))?
        }
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let bundle = generate(&cfg)?;
    bundle.save(out)?;
    let oracle = oracle_report(&bundle)?;
    write_json(&out.join("oracle.json"), &oracle)?;
    Ok(json!({
        "stage": "synth",
        "seed": cfg.seed,
        "samples": [bundle.train.len(), bundle.validation.len(), bundle.test.len()],
        "corpus": bundle.corpus.len(),
        "source_wga": oracle.source_wga,
        "oracle_head_wga": oracle.oracle_head_wga,
    }))
}

pub fn run_paths(out: &Path) -> (PathBuf, PathBuf) {
    (out.join(SLICES_FILE), out.join(METRICS_FILE))
}
