//! `ladder`: staged front-end. Each stage reads the previous stage's files
//! from the run directory (`--out`) and writes its own, so any stage can be
//! replayed on its own.

mod report;
mod stages;
mod validate;

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use ladder_core::mitigator::CalibrationMode;
use ladder_core::retrieval::Similarity;
use ladder_core::slicer::TauPolicy;
use serde::Serialize;
use serde_json::json;

pub const GIT_DESCRIBE: &str = env!("LADDER_GIT_DESCRIBE");

#[derive(Debug, Parser)]
#[command(name = "ladder", version, about = "Error-slice discovery and bias mitigation in embedding space")]
struct Cli {
    /// Append the run record to this file instead of `<out>/run_log.jsonl`.
    #[arg(long, global = true)]
    log: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(tag = "stage", rename_all = "kebab-case")]
enum Command {
    /// Fit the affine map from classifier features to the VLR image space.
    FitProjection(FitArgs),
    /// Per-class Δ, top-K sentence retrieval, prompts and LLM hypotheses.
    Discover(DiscoverArgs),
    /// Score hypotheses, cut slices and flag error slices.
    Slices(SlicesArgs),
    /// Train one balanced head per flagged hypothesis plus an ERM control.
    Mitigate(MitigateArgs),
    /// Evaluate source predictions, heads and the routed ensemble.
    Eval(EvalArgs),
    /// Generate a synthetic planted-bias benchmark with canned LLM responses.
    Synth(SynthArgs),
    /// Render slices.json and metrics.json as Markdown.
    Report(ReportArgs),
    /// Check datasets, corpora, projectors and bundles for format errors.
    Validate(ValidateArgs),
}

#[derive(Debug, Args, Serialize)]
struct FitArgs {
    /// Training split manifest (or its directory).
    #[arg(long)]
    train: PathBuf,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = ladder_core::projection::DEFAULT_RIDGE)]
    ridge: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct CorpusArgs {
    /// Text corpus (`corpus.jsonl`).
    #[arg(long)]
    pub corpus: PathBuf,
    /// Corpus embeddings; defaults to the corpus path with a `.ladremb` extension.
    #[arg(long)]
    pub corpus_emb: Option<PathBuf>,
}

impl CorpusArgs {
    pub fn embeddings_path(&self) -> PathBuf {
        self.corpus_emb.clone().unwrap_or_else(|| self.corpus.with_extension("ladremb"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Mock,
    Http,
}

#[derive(Debug, Args, Serialize)]
pub struct ProviderArgs {
    #[arg(long, value_enum, default_value_t = ProviderKind::Mock)]
    pub provider: ProviderKind,
    /// Canned responses keyed by prompt hash (mock provider).
    #[arg(long)]
    pub mock_responses: Option<PathBuf>,
    /// Chat-completions endpoint URL (http provider).
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long, default_value_t = 0.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = 2048)]
    pub max_tokens: u32,
    /// Environment variable holding the API key.
    #[arg(long, default_value = ladder_core::hypothesis::DEFAULT_API_KEY_ENV)]
    pub api_key_env: String,
    #[arg(long, default_value_t = 120)]
    pub timeout_secs: u64,
    #[arg(long, default_value_t = 3)]
    pub max_retries: u32,
}

#[derive(Debug, Args, Serialize)]
struct DiscoverArgs {
    /// Validation split manifest (or its directory).
    #[arg(long)]
    val: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    out: PathBuf,
    /// Sentences retrieved per class; 200 by default, 100 with --medical.
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long, default_value_t = Similarity::Cosine)]
    similarity: Similarity,
    #[arg(long, default_value = ladder_core::pipeline::DEFAULT_TASK)]
    task: String,
    #[arg(long, default_value = ladder_core::pipeline::DEFAULT_MODALITY)]
    modality: String,
    /// Use the radiology-report prompt variant.
    #[arg(long)]
    medical: bool,
    #[arg(long, default_value_t = ladder_core::hypothesis::DEFAULT_MAX_HYPOTHESES)]
    max_hypotheses: usize,
    #[command(flatten)]
    #[serde(flatten)]
    provider: ProviderArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedderKind {
    /// Look test sentences up in the corpus.
    Lookup,
    /// Embed test sentences through an HTTP endpoint.
    Remote,
}

#[derive(Debug, Args, Serialize)]
pub struct EmbedderArgs {
    #[arg(long, value_enum, default_value_t = EmbedderKind::Lookup)]
    pub embedder: EmbedderKind,
    #[arg(long)]
    pub embed_endpoint: Option<String>,
    #[arg(long)]
    pub embed_model: Option<String>,
    #[arg(long, default_value = ladder_core::hypothesis::DEFAULT_API_KEY_ENV)]
    pub embed_api_key_env: String,
}

#[derive(Debug, Args, Serialize)]
struct SlicesArgs {
    #[arg(long)]
    val: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    out: PathBuf,
    /// Similarity for hypothesis scoring (the discover setting by default).
    #[arg(long)]
    similarity: Option<Similarity>,
    /// median | percentile:<p> | fixed:<v>
    #[arg(long, default_value_t = TauPolicy::Median)]
    tau: TauPolicy,
    #[arg(long, default_value_t = ladder_core::slicer::DEFAULT_GAP_THRESHOLD)]
    gap_threshold: f64,
    #[arg(long, default_value_t = ladder_core::hypothesis::DEFAULT_MAX_HYPOTHESES)]
    max_hypotheses: usize,
    /// Keep every sample's hypothesis score in slices.json.
    #[arg(long)]
    dump_scores: bool,
    #[command(flatten)]
    #[serde(flatten)]
    embedder: EmbedderArgs,
}

#[derive(Debug, Args, Serialize)]
struct MitigateArgs {
    #[arg(long)]
    val: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "zscore")]
    calibration: CalibrationMode,
    #[arg(long, default_value_t = ladder_core::mitigator::DEFAULT_L2)]
    l2: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    #[serde(flatten)]
    embedder: EmbedderArgs,
}

#[derive(Debug, Args, Serialize)]
struct EvalArgs {
    /// Split to evaluate on (usually test).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Group tag defining worst-group cells; repeatable. Defaults to every tag all samples carry.
    #[arg(long = "group-key")]
    group_keys: Vec<String>,
    /// Ground-truth slices for Precision@k of the flagged slices.
    #[arg(long)]
    ground_truth: Option<PathBuf>,
    /// Which split of a synthbench ground_truth.json the slices were cut on.
    #[arg(long, default_value = "validation")]
    gt_split: String,
    /// Precision@k cutoffs; repeatable.
    #[arg(long = "k", default_values_t = [10])]
    k: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthPreset {
    Default,
    NullBias,
    MultiBias,
}

#[derive(Debug, Args, Serialize)]
struct SynthArgs {
    /// JSON file with generator settings; unspecified fields take preset values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SynthPreset::Default)]
    preset: SynthPreset,
    /// Overrides the seed from --config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct ReportArgs {
    /// Run directory with slices.json (and optionally metrics.json).
    #[arg(long)]
    out: PathBuf,
    /// Output file; defaults to `<out>/report.md`.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct ValidateArgs {
    /// Manifests, dataset directories, corpus .jsonl files, .ladremb files,
    /// projector or bundle directories, or a whole synth directory.
    #[arg(required = true)]
    paths: Vec<PathBuf>,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::FitProjection(_) => "fit-projection",
            Command::Discover(_) => "discover",
            Command::Slices(_) => "slices",
            Command::Mitigate(_) => "mitigate",
            Command::Eval(_) => "eval",
            Command::Synth(_) => "synth",
            Command::Report(_) => "report",
            Command::Validate(_) => "validate",
        }
    }

    fn out_dir(&self) -> Option<&Path> {
        match self {
            Command::FitProjection(a) => Some(&a.out),
            Command::Discover(a) => Some(&a.out),
            Command::Slices(a) => Some(&a.out),
            Command::Mitigate(a) => Some(&a.out),
            Command::Eval(a) => Some(&a.out),
            Command::Synth(a) => Some(&a.out),
            Command::Report(a) => Some(&a.out),
            Command::Validate(_) => None,
        }
    }

    fn run(&self) -> Result<serde_json::Value, CliError> {
        match self {
            Command::FitProjection(a) => stages::fit_projection(&a.train, &a.out, a.ridge),
            Command::Discover(a) => stages::discover(&stages::DiscoverOptions {
                val: &a.val,
                corpus: &a.corpus,
                out: &a.out,
                top_k: a.top_k,
                similarity: a.similarity,
                task: &a.task,
                modality: &a.modality,
                medical: a.medical,
                max_hypotheses: a.max_hypotheses,
                provider: &a.provider,
            }),
            Command::Slices(a) => stages::slices(&stages::SlicesOptions {
                val: &a.val,
                corpus: &a.corpus,
                out: &a.out,
                similarity: a.similarity,
                tau: a.tau,
                gap_threshold: a.gap_threshold,
                max_hypotheses: a.max_hypotheses,
                dump_scores: a.dump_scores,
                embedder: &a.embedder,
            }),
            Command::Mitigate(a) => stages::mitigate(&stages::MitigateOptions {
                val: &a.val,
                corpus: &a.corpus,
                out: &a.out,
                calibration: a.calibration,
                l2: a.l2,
                seed: a.seed,
                embedder: &a.embedder,
            }),
            Command::Eval(a) => stages::eval(&a.data, &a.out, &a.group_keys, a.ground_truth.as_deref(), &a.gt_split, &a.k),
            Command::Synth(a) => stages::synth(a.config.as_deref(), a.preset, a.seed, &a.out),
            Command::Report(a) => {
                let output = a.output.clone().unwrap_or_else(|| a.out.join("report.md"));
                report::render_to_file(&a.out, &output)
            }
            Command::Validate(a) => validate::run(&a.paths),
        }
    }
}

/// Domain failure: exit status 1 and one JSON line on stderr.
#[derive(Debug)]
pub struct CliError {
    pub kind: String,
    pub message: String,
}

impl CliError {
    pub fn new(kind: &str, message: impl Into<String>) -> Self {
        Self { kind: kind.to_string(), message: message.into() }
    }
}

impl From<ladder_core::PipelineError> for CliError {
    fn from(e: ladder_core::PipelineError) -> Self {
        Self::new(e.kind(), e.to_string())
    }
}

macro_rules! via_pipeline {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                ladder_core::PipelineError::from(e).into()
            }
        }
    )*};
}
via_pipeline!(
    ladder_core::corpus::CorpusError,
    ladder_core::projection::ProjectionError,
    ladder_core::hypothesis::HypothesisError,
    ladder_core::slicer::SliceError,
    ladder_core::mitigator::MitigationError,
    ladder_core::metrics::MetricsError,
    ladder_core::artifacts::ArtifactError
);

impl From<ladder_core::synthbench::SynthError> for CliError {
    fn from(e: ladder_core::synthbench::SynthError) -> Self {
        Self::new(e.kind(), e.to_string())
    }
}

fn append_run_log(path: &Path, record: &serde_json::Value) -> std::io::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{record}")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let started = Instant::now();
    let result = cli.command.run();
    let wall = started.elapsed().as_secs_f64();

    let log_path = cli.log.clone().or_else(|| cli.command.out_dir().map(|d| d.join("run_log.jsonl")));
    if let Some(path) = log_path {
        let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
        let mut record = json!({
            "stage": cli.command.name(),
            "timestamp": timestamp,
            "git_describe": GIT_DESCRIBE,
            "wall_time_s": wall,
            "status": if result.is_ok() { "ok" } else { "error" },
            "config": serde_json::to_value(&cli.command).unwrap_or(serde_json::Value::Null),
        });
        if let Err(e) = &result {
            record["error"] = json!(e.kind);
        }
        if let Err(e) = append_run_log(&path, &record) {
            log::warn!("cannot append to {}: {e}", path.display());
        }
    }

    match result {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({"error": e.kind, "message": e.message}));
            ExitCode::from(1)
        }
    }
}
