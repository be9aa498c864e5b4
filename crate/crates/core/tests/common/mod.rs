#![allow(dead_code)]

use std::path::PathBuf;

use ladder_core::hypothesis::{parse_llm_response, HypothesisError};
use serde_json::Value;

pub fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).parent().unwrap().join("core/tests/fixtures/llm_responses")
}

fn error_kind(e: &HypothesisError) -> &'static str {
    match e {
        HypothesisError::Parse { .. } => "ParseError",
        HypothesisError::Pairing(_) => "PairingError",
        _ => "Other",
    }
}

/// Parses every fixture and compares with `expectations.json`.
/// Returns (fixture count, malformed count, mismatches).
pub fn check_llm_fixtures() -> (usize, usize, Vec<String>) {
    let dir = fixture_dir();
    let expected: serde_json::Map<String, Value> =
        serde_json::from_str(&std::fs::read_to_string(dir.join("expectations.json")).unwrap()).unwrap();
    let mut mismatches = Vec::new();
    let mut malformed = 0;
    for (file, want) in &expected {
        let text = std::fs::read_to_string(dir.join(file)).unwrap_or_else(|e| panic!("{file}: {e}"));
        let got = parse_llm_response(&text);
        match (want["outcome"].as_str().unwrap(), got) {
            ("ok", Ok(set)) => {
                let hyps = want["hypotheses"].as_array().unwrap();
                if hyps.len() != set.hypotheses.len() {
                    mismatches.push(format!("{file}: {} hypotheses, expected {}", set.hypotheses.len(), hyps.len()));
                    continue;
                }
                for (h, w) in set.hypotheses.iter().zip(hyps) {
                    let checks = [
                        ("id", h.id.as_str() == w["id"]),
                        ("attribute", h.attribute.as_str() == w["attribute"]),
                        ("n_sentences", h.test_sentences.len() as u64 == w["n_sentences"]),
                        ("first", h.test_sentences[0].as_str() == w["first"]),
                        ("statement", w.get("statement").is_none_or(|s| h.statement.as_str() == s)),
                    ];
                    for (field, pass) in checks {
                        if !pass {
                            mismatches.push(format!("{file} {}: {field} mismatch ({h:?})", h.id));
                        }
                    }
                }
            }
            ("error", Err(e)) => {
                malformed += 1;
                if error_kind(&e) != want["kind"] {
                    mismatches.push(format!("{file}: got {}, expected {}", error_kind(&e), want["kind"]));
                }
            }
            (outcome, got) => mismatches.push(format!("{file}: expected {outcome}, got {got:?}")),
        }
    }
    (expected.len(), malformed, mismatches)
}
