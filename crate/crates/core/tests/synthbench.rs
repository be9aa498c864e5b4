use ladder_core::mitigator::MitigationConfig;
use ladder_core::slicer::SliceConfig;
use ladder_core::synthbench::{generate, oracle_report, run_pipeline, SynthConfig};

#[test]
fn source_model_matches_planted_accuracies() {
    for seed in 0..3 {
        let bundle = generate(&SynthConfig { seed, ..SynthConfig::default() }).unwrap();
        let oracle = oracle_report(&bundle).unwrap();
        let expected = bundle.analytic["expected_source_wga"];
        assert!((oracle.source_wga - expected).abs() <= 0.03, "seed {seed}: {} vs {expected}", oracle.source_wga);
        // the bias hides behind a healthy average
        assert!(oracle.source_mean_accuracy - oracle.source_wga >= 0.20, "seed {seed}");
    }
}

#[test]
fn ensemble_strictly_beats_source_model() {
    for seed in 0..3 {
        let bundle = generate(&SynthConfig { seed, ..SynthConfig::default() }).unwrap();
        let run = run_pipeline(&bundle, &SliceConfig::default(), &MitigationConfig { seed, ..Default::default() }).unwrap();
        let eval = run.test_eval.unwrap();
        let wga = |m: &ladder_core::pipeline::ModelMetrics| m.wga.as_ref().unwrap().worst;
        assert!(wga(&eval.ensemble) > wga(&eval.source), "seed {seed}");
        assert!(wga(&eval.ensemble) >= wga(&eval.erm_head) - 1e-12, "seed {seed}");
    }
}

#[test]
fn null_bias_source_has_no_group_gap() {
    let bundle = generate(&SynthConfig::null_bias()).unwrap();
    let oracle = oracle_report(&bundle).unwrap();
    assert!(oracle.source_mean_accuracy - oracle.source_wga < 0.05);
}

#[test]
fn generation_is_deterministic() {
    let cfg = SynthConfig { n_train: 300, n_val: 200, n_test: 200, n_distractor_sentences: 20, ..SynthConfig::default() };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate(&cfg).unwrap().save(a.path()).unwrap();
    generate(&cfg).unwrap().save(b.path()).unwrap();
    for f in ["corpus.jsonl", "corpus.ladremb", "mock_responses.jsonl", "ground_truth.json", "validation/manifest.json"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}
