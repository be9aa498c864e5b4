mod common;

use ladder_core::hypothesis::{parse_llm_response, render_response};

#[test]
fn fixtures_parse_or_fail_as_annotated() {
    let (n, malformed, mismatches) = common::check_llm_fixtures();
    assert_eq!(n, 12);
    assert_eq!(malformed, 3);
    assert!(mismatches.is_empty(), "{mismatches:#?}");
}

#[test]
fn every_fixture_has_an_annotation() {
    let dir = common::fixture_dir();
    let text = std::fs::read_to_string(dir.join("expectations.json")).unwrap();
    for e in std::fs::read_dir(&dir).unwrap().flatten() {
        let name = e.file_name().into_string().unwrap();
        if name.ends_with(".txt") {
            assert!(text.contains(&format!("\"{name}\"")), "{name} has no expectation");
        }
    }
}

#[test]
fn parsed_fixtures_survive_canonical_rendering() {
    let dir = common::fixture_dir();
    for e in std::fs::read_dir(&dir).unwrap().flatten() {
        let text = std::fs::read_to_string(e.path()).unwrap();
        if let Ok(set) = parse_llm_response(&text) {
            let again = parse_llm_response(&render_response(&set)).unwrap();
            assert_eq!(again.hypotheses, set.hypotheses, "{}", e.path().display());
        }
    }
}
