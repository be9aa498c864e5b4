use std::path::{Path, PathBuf};

use ladder_core::artifacts::{read_json, DiscoverIndex, MetricsFile, SlicesFile};
use ladder_core::corpus::{load_corpus, load_dataset, load_embeddings, load_samples, SliceDataset, TextCorpus};
use ladder_core::hypothesis::{HypothesisSet, MockProvider};
use ladder_core::mitigator::MitigationBundle;
use ladder_core::projection::AffineProjector;
use ladder_core::synthbench::GroundTruthFile;
use serde_json::{json, Value};

use crate::CliError;

struct Check {
    path: PathBuf,
    kind: &'static str,
    result: Result<Value, String>,
}

#[derive(Default)]
struct Validator {
    checks: Vec<Check>,
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn dataset_detail(ds: &SliceDataset) -> Value {
    json!({
        "name": ds.name,
        "split": ds.split,
        "samples": ds.len(),
        "classes": ds.classes.len(),
        "d_phi": ds.features.dim(),
        "d_psi": ds.vlr_image.as_ref().map(|v| v.dim()),
    })
}

impl Validator {
    fn push(&mut self, path: &Path, kind: &'static str, result: Result<Value, String>) {
        self.checks.push(Check { path: path.to_path_buf(), kind, result });
    }

    fn dataset(&mut self, manifest: &Path) -> Option<SliceDataset> {
        match load_dataset(manifest) {
            Ok(ds) => {
                self.push(manifest, "dataset", Ok(dataset_detail(&ds)));
                Some(ds)
            }
            Err(e) => {
                self.push(manifest, "dataset", Err(err(e)));
                None
            }
        }
    }

    fn corpus(&mut self, jsonl: &Path, emb: &Path) -> Option<TextCorpus> {
        match load_corpus(jsonl, emb) {
            Ok(c) => {
                self.push(jsonl, "corpus", Ok(json!({"sentences": c.len(), "dim": c.embeddings.dim()})));
                Some(c)
            }
            Err(e) => {
                self.push(jsonl, "corpus", Err(err(e)));
                None
            }
        }
    }

    /// A `synth` output directory: three splits, a corpus and the fixtures,
    /// plus cross-file consistency.
    fn synth_dir(&mut self, dir: &Path) {
        let splits: Vec<Option<SliceDataset>> =
            ["train", "validation", "test"].iter().map(|s| self.dataset(&dir.join(s).join("manifest.json"))).collect();
        let corpus = self.corpus(&dir.join("corpus.jsonl"), &dir.join("corpus.ladremb"));
        let loaded: Vec<&SliceDataset> = splits.iter().flatten().collect();
        let mut problems = Vec::new();
        if let Some(first) = loaded.first() {
            for ds in &loaded[1..] {
                if ds.classes != first.classes {
                    problems.push(format!("{} classes differ from {}", ds.name, first.name));
                }
                if ds.features.dim() != first.features.dim() {
                    problems.push("feature dimension differs between splits".to_string());
                }
            }
            if let Some(c) = &corpus {
                for ds in &loaded {
                    match &ds.vlr_image {
                        Some(v) if v.dim() != c.embeddings.dim() => {
                            problems.push(format!("vlr_image dim {} != corpus dim {}", v.dim(), c.embeddings.dim()))
                        }
                        None => problems.push(format!("{:?} split lacks vlr_image", ds.split)),
                        _ => {}
                    }
                }
            }
        }
        self.push(dir, "consistency", if problems.is_empty() { Ok(json!({})) } else { Err(problems.join("; ")) });

        let mock = dir.join("mock_responses.jsonl");
        if mock.exists() {
            self.push(&mock, "mock_responses", MockProvider::load(&mock).map(|m| json!({"entries": m.len()})).map_err(err));
        }
        let gt_path = dir.join("ground_truth.json");
        if gt_path.exists() {
            let result = read_json::<GroundTruthFile>(&gt_path).map_err(err).and_then(|gt| {
                for (slices, ds) in [(&gt.validation, splits[1].as_ref()), (&gt.test, splits[2].as_ref())] {
                    if let Some(ds) = ds {
                        if let Some(bad) = slices.slices.iter().flat_map(|s| &s.members).find(|&&i| i >= ds.len()) {
                            return Err(format!("slice member {bad} out of range for {} samples", ds.len()));
                        }
                    }
                }
                Ok(json!({"validation_slices": gt.validation.slices.len(), "test_slices": gt.test.slices.len()}))
            });
            self.push(&gt_path, "ground_truth", result);
        }
    }

    fn json_file(&mut self, path: &Path) {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let (kind, result): (&'static str, Result<Value, String>) = if name == "slices.json" {
            ("slices", read_json::<SlicesFile>(path).map(|f| json!({"reports": f.reports.len()})).map_err(err))
        } else if name == "metrics.json" {
            ("metrics", read_json::<MetricsFile>(path).map(|f| json!({"heads": f.eval.heads.len()})).map_err(err))
        } else if name == "discover.json" {
            ("discover", read_json::<DiscoverIndex>(path).map(|f| json!({"classes": f.classes})).map_err(err))
        } else if name == "ground_truth.json" {
            ("ground_truth", read_json::<GroundTruthFile>(path).map(|f| json!({"planted": f.planted.len()})).map_err(err))
        } else if name.starts_with("hypotheses_") {
            ("hypotheses", read_json::<HypothesisSet>(path).map(|s| json!({"hypotheses": s.hypotheses.len()})).map_err(err))
        } else {
            return;
        };
        self.push(path, kind, result);
    }

    fn dir(&mut self, dir: &Path) -> bool {
        if dir.join("manifest.json").exists() {
            self.dataset(&dir.join("manifest.json"));
        } else if dir.join("projector.json").exists() {
            let r = AffineProjector::load(dir).map(|p| json!({"d_phi": p.d_phi(), "d_psi": p.d_psi()})).map_err(err);
            self.push(dir, "projector", r);
        } else if dir.join("bundle.json").exists() {
            let r = MitigationBundle::load(dir).map(|b| json!({"heads": b.heads.len(), "classes": b.n_classes})).map_err(err);
            self.push(dir, "bundle", r);
        } else if dir.join("corpus.jsonl").exists() && dir.join("train").is_dir() {
            self.synth_dir(dir);
        } else {
            // a run directory: check whatever stage outputs it holds
            let before = self.checks.len();
            let Ok(entries) = std::fs::read_dir(dir) else { return false };
            let mut children: Vec<PathBuf> = entries.flatten().map(|e| e.path()).collect();
            children.sort();
            for child in children {
                if child.is_dir() {
                    self.dir(&child);
                } else if child.extension().is_some_and(|e| e == "json") {
                    self.json_file(&child);
                }
            }
            return self.checks.len() > before;
        }
        true
    }

    fn path(&mut self, path: &Path) {
        if !path.exists() {
            self.push(path, "missing", Err("path does not exist".into()));
            return;
        }
        if path.is_dir() {
            if !self.dir(path) {
                self.push(path, "unknown", Err("no recognizable artifacts in directory".into()));
            }
            return;
        }
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") if name.ends_with("manifest.json") => {
                self.dataset(path);
            }
            Some("json") => {
                let before = self.checks.len();
                self.json_file(path);
                if self.checks.len() == before {
                    self.push(path, "unknown", Err("unrecognized JSON artifact".into()));
                }
            }
            Some("ladremb") => {
                let r = load_embeddings(path).map(|m| json!({"rows": m.rows(), "dim": m.dim()})).map_err(err);
                self.push(path, "embeddings", r);
            }
            Some("jsonl") if name.starts_with("mock_responses") => {
                self.push(path, "mock_responses", MockProvider::load(path).map(|m| json!({"entries": m.len()})).map_err(err));
            }
            Some("jsonl") if path.with_extension("ladremb").exists() => {
                self.corpus(path, &path.with_extension("ladremb"));
            }
            Some("jsonl") => {
                self.push(path, "samples", load_samples(path).map(|s| json!({"samples": s.len()})).map_err(err));
            }
            _ => self.push(path, "unknown", Err("unrecognized file type".into())),
        }
    }
}

/// Prints one JSON line per checked artifact; fails if any check failed.
pub fn run(paths: &[PathBuf]) -> Result<Value, CliError> {
    let mut v = Validator::default();
    for p in paths {
        v.path(p);
    }
    let mut failed = Vec::new();
    for c in &v.checks {
        let line = match &c.result {
            Ok(detail) => json!({"path": c.path.display().to_string(), "kind": c.kind, "ok": true, "detail": detail}),
            Err(e) => {
                failed.push(format!("{}: {e}", c.path.display()));
                json!({"path": c.path.display().to_string(), "kind": c.kind, "ok": false, "error": e})
            }
        };
        println!("{line}");
    }
    if failed.is_empty() {
        Ok(json!({"stage": "validate", "checked": v.checks.len(), "errors": 0}))
    } else {
        Err(CliError::new("ValidationFailed", format!("{} of {} checks failed: {}", failed.len(), v.checks.len(), failed.join("; "))))
    }
}
