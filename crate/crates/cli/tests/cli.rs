use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ladder_core::artifacts::{MetricsFile, SlicesFile};
use ladder_core::mitigator::MitigationConfig;
use ladder_core::slicer::SliceConfig;
use ladder_core::synthbench::{generate, run_pipeline, SynthConfig};
use serde_json::Value;

const SMALL: &str = r#"{"n_train": 1200, "n_val": 800, "n_test": 800, "n_distractor_sentences": 60, "top_k": 50}"#;

fn ladder(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ladder")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Value {
    let out = ladder(args);
    assert!(
        out.status.success(),
        "ladder {args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stderr),
        String::from_utf8_lossy(&out.stdout)
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    serde_json::from_str(stdout.lines().last().unwrap()).unwrap()
}

fn error_kind(out: &Output) -> String {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("error line on stderr");
    let v: Value = serde_json::from_str(line).unwrap_or_else(|e| panic!("not JSON: {line}: {e}"));
    assert!(v["message"].is_string());
    v["error"].as_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// synth → fit-projection → discover → slices → mitigate → eval → report.
fn full_run(root: &Path, seed: &str) -> (PathBuf, PathBuf) {
    let data = root.join("data");
    let run = root.join("run");
    let cfg = root.join("synth.json");
    fs::write(&cfg, SMALL).unwrap();
    let corpus = data.join("corpus.jsonl");
    ok(&["synth", "--config", s(&cfg), "--seed", seed, "--out", s(&data)]);
    ok(&["fit-projection", "--train", s(&data.join("train")), "--out", s(&run)]);
    ok(&[
        "discover",
        "--val",
        s(&data.join("validation")),
        "--corpus",
        s(&corpus),
        "--top-k",
        "50",
        "--mock-responses",
        s(&data.join("mock_responses.jsonl")),
        "--out",
        s(&run),
    ]);
    ok(&["slices", "--val", s(&data.join("validation")), "--corpus", s(&corpus), "--out", s(&run)]);
    ok(&["mitigate", "--val", s(&data.join("validation")), "--corpus", s(&corpus), "--out", s(&run), "--seed", seed]);
    ok(&[
        "eval",
        "--data",
        s(&data.join("test")),
        "--out",
        s(&run),
        "--ground-truth",
        s(&data.join("ground_truth.json")),
    ]);
    ok(&["report", "--out", s(&run)]);
    (data, run)
}

fn files_under(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "run_log.jsonl" {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn synth_then_full_pipeline_matches_in_memory_run() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, run) = full_run(tmp.path(), "3");

    // the same stages without files
    let mut cfg: SynthConfig = serde_json::from_str(SMALL).unwrap();
    cfg.seed = 3;
    let bundle = generate(&cfg).unwrap();
    let mem = run_pipeline(&bundle, &SliceConfig::default(), &MitigationConfig { seed: 3, ..Default::default() }).unwrap();

    let slices: SlicesFile = serde_json::from_str(&fs::read_to_string(run.join("slices.json")).unwrap()).unwrap();
    let mut expected = mem.reports.clone();
    expected.iter_mut().for_each(|r| r.scores = None);
    assert_eq!(slices.reports, expected);

    let metrics: MetricsFile = serde_json::from_str(&fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics.precision_at_k["10"], mem.precision_at_10);
    assert_eq!(Some(metrics.eval), mem.test_eval);

    // the planted hypothesis tops each class and is flagged
    for c in 0..2 {
        let top = slices.reports.iter().find(|r| r.class_label == c).unwrap();
        assert!(top.is_error_slice && top.gap >= 0.10, "{top:?}");
    }

    // report gaps agree with slices.json at printed precision
    let md = fs::read_to_string(run.join("report.md")).unwrap();
    for r in &slices.reports {
        let row = md
            .lines()
            .find(|l| l.starts_with(&format!("| {} | {} |", r.hypothesis_id, r.attribute)))
            .unwrap_or_else(|| panic!("no row for {}", r.attribute));
        let cells: Vec<&str> = row.split('|').map(str::trim).collect();
        assert_eq!(cells[6], format!("{:.3}", r.gap));
        assert_eq!(cells[7] == "✓", r.is_error_slice);
    }

    let log = fs::read_to_string(run.join("run_log.jsonl")).unwrap();
    let stages: Vec<String> = log
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["stage"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(stages, ["fit-projection", "discover", "slices", "mitigate", "eval", "report"]);
    let first: Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for key in ["timestamp", "git_describe", "wall_time_s", "config"] {
        assert!(first.get(key).is_some(), "run_log lacks {key}");
    }

    ok(&["validate", s(&tmp.path().join("data")), s(&run)]);
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    full_run(a.path(), "11");
    full_run(b.path(), "11");
    let fa = files_under(a.path());
    let fb = files_under(b.path());
    assert_eq!(fa.keys().collect::<Vec<_>>(), fb.keys().collect::<Vec<_>>());
    for (k, v) in &fa {
        assert!(v == &fb[k], "{} differs between runs", k.display());
    }
    assert!(fa.len() > 20);
}

#[test]
fn slices_without_discover_is_missing_input() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ladder(&["slices", "--val", "nowhere", "--corpus", "c.jsonl", "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_kind(&out), "MissingInput");
    // the failed run is still logged
    let log = fs::read_to_string(tmp.path().join("run_log.jsonl")).unwrap();
    assert!(log.contains("\"status\":\"error\""));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(ladder(&["slices", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(ladder(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(ladder(&["slices", "--val", "v", "--corpus", "c", "--out", "o", "--tau", "mode"]).status.code(), Some(2));
}

#[test]
fn null_bias_mitigation_reports_no_error_slices() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    let cfg = tmp.path().join("synth.json");
    fs::write(&cfg, SMALL).unwrap();
    let corpus = data.join("corpus.jsonl");
    ok(&["synth", "--preset", "null-bias", "--config", s(&cfg), "--seed", "0", "--out", s(&data)]);
    ok(&["fit-projection", "--train", s(&data.join("train")), "--out", s(&run)]);
    ok(&[
        "discover",
        "--val",
        s(&data.join("validation")),
        "--corpus",
        s(&corpus),
        "--top-k",
        "50",
        "--mock-responses",
        s(&data.join("mock_responses.jsonl")),
        "--out",
        s(&run),
    ]);
    let v = ok(&["slices", "--val", s(&data.join("validation")), "--corpus", s(&corpus), "--out", s(&run)]);
    assert_eq!(v["flagged"], serde_json::json!([]));
    let out = ladder(&["mitigate", "--val", s(&data.join("validation")), "--corpus", s(&corpus), "--out", s(&run)]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_kind(&out), "NoErrorSlices");
    ok(&["report", "--out", s(&run)]);
    assert!(fs::read_to_string(run.join("report.md")).unwrap().contains("Not evaluated"));
}

#[test]
fn wrong_top_k_misses_the_mock() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    let cfg = tmp.path().join("synth.json");
    fs::write(&cfg, SMALL).unwrap();
    ok(&["synth", "--config", s(&cfg), "--out", s(&data)]);
    ok(&["fit-projection", "--train", s(&data.join("train")), "--out", s(&run)]);
    let out = ladder(&[
        "discover",
        "--val",
        s(&data.join("validation")),
        "--corpus",
        s(&data.join("corpus.jsonl")),
        "--top-k",
        "40",
        "--mock-responses",
        s(&data.join("mock_responses.jsonl")),
        "--out",
        s(&run),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_kind(&out), "MockMissing");
}

#[test]
fn report_without_hypotheses() {
    let tmp = tempfile::tempdir().unwrap();
    let slices = r#"{"dataset": "d", "class_names": ["a", "b"], "similarity": "cosine", "tau": "median",
        "gap_threshold": 0.1, "n_hypotheses": 0, "reports": []}"#;
    fs::write(tmp.path().join("slices.json"), slices).unwrap();
    ok(&["report", "--out", s(tmp.path())]);
    let md = fs::read_to_string(tmp.path().join("report.md")).unwrap();
    assert!(md.contains("## No hypotheses"));
}

#[test]
fn report_on_malformed_slices_is_parse_error() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("slices.json"), "{not json").unwrap();
    let out = ladder(&["report", "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_kind(&out), "ParseError");
}

#[test]
fn validate_flags_corrupt_embeddings() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let cfg = tmp.path().join("synth.json");
    fs::write(&cfg, SMALL).unwrap();
    ok(&["synth", "--config", s(&cfg), "--out", s(&data)]);
    ok(&["validate", s(&data)]);

    let emb = data.join("validation").join("features.ladremb");
    let mut bytes = fs::read(&emb).unwrap();
    bytes[0] = b'X';
    fs::write(&emb, bytes).unwrap();
    let out = ladder(&["validate", s(&data)]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_kind(&out), "ValidationFailed");
    let stdout = String::from_utf8(out.stdout).unwrap();
    let bad: Vec<Value> = stdout
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap())
        .filter(|v| v["ok"] == false)
        .collect();
    assert_eq!(bad.len(), 1, "{stdout}");
    assert!(bad[0]["path"].as_str().unwrap().contains("validation"));

    let out = ladder(&["validate", s(&tmp.path().join("absent"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn synth_config_errors_are_domain_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, r#"{"bias_fraction": 0.2}"#).unwrap();
    let out = ladder(&["synth", "--config", s(&cfg), "--out", s(&tmp.path().join("x"))]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_kind(&out), "ConfigError");
    fs::write(&cfg, r#"{"no_such_field": 1}"#).unwrap();
    let out = ladder(&["synth", "--config", s(&cfg), "--out", s(&tmp.path().join("x"))]);
    assert_eq!(error_kind(&out), "ParseError");
}
