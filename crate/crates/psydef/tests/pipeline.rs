use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use psydef::config::{ConfigError, PipelineConfig};
use psydef::pipeline::{run_pipeline, PipelineError, Stage};
use serde_json::Value;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn config_in(dir: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::load(&fixtures().join("pipeline.toml")).unwrap();
    cfg.paths.output = dir.join("out");
    cfg
}

fn all() -> BTreeSet<Stage> {
    Stage::parse_list("all").unwrap()
}

fn stages(list: &str) -> BTreeSet<Stage> {
    Stage::parse_list(list).unwrap()
}

#[test]
fn full_run_then_noop_rerun() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config_in(tmp.path());
    let first = run_pipeline(&cfg, &all()).unwrap();
    assert_eq!(first.ran(), Stage::ALL.to_vec());
    for stage in Stage::ALL {
        assert!(cfg.paths.output.join(stage.name()).join("manifest.json").is_file(), "{stage}");
    }
    let metrics = cfg.paths.output.join("eval/metrics.json");
    let before = fs::read(&metrics).unwrap();

    let second = run_pipeline(&cfg, &all()).unwrap();
    assert!(second.ran().is_empty(), "{:?}", second.ran());
    assert_eq!(fs::read(&metrics).unwrap(), before);
}

#[test]
fn identical_configs_give_identical_outputs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (ca, cb) = (config_in(a.path()), config_in(b.path()));
    run_pipeline(&ca, &all()).unwrap();
    run_pipeline(&cb, &all()).unwrap();
    for file in ["eval/metrics.json", "train/ckpt/model.bin", "qc/qc_table.csv", "analyze/analysis.json"] {
        assert_eq!(
            fs::read(ca.paths.output.join(file)).unwrap(),
            fs::read(cb.paths.output.join(file)).unwrap(),
            "{file}"
        );
    }
}

#[test]
fn catalog_edit_reruns_from_features() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config_in(tmp.path());
    let catalog = tmp.path().join("catalog.json");
    fs::copy(&cfg.paths.catalog, &catalog).unwrap();
    cfg.paths.catalog = catalog.clone();
    run_pipeline(&cfg, &all()).unwrap();

    let mut doc: Value = serde_json::from_str(&fs::read_to_string(&catalog).unwrap()).unwrap();
    let statement = doc["indicators"][0]["statement"].as_str().unwrap().to_string();
    doc["indicators"][0]["statement"] = Value::String(format!("{statement} again"));
    fs::write(&catalog, serde_json::to_string_pretty(&doc).unwrap()).unwrap();

    let rerun = run_pipeline(&cfg, &all()).unwrap();
    assert_eq!(rerun.ran(), vec![Stage::Features, Stage::Train, Stage::Eval, Stage::Analyze]);
    assert_eq!(rerun.skipped(), vec![Stage::Ingest, Stage::Stressor, Stage::Augment, Stage::Qc]);
}

#[test]
fn config_change_invalidates_downstream_only() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config_in(tmp.path());
    run_pipeline(&cfg, &all()).unwrap();
    cfg.fusion.max_epochs = 3;
    let rerun = run_pipeline(&cfg, &all()).unwrap();
    assert_eq!(rerun.ran(), vec![Stage::Train, Stage::Eval]);
}

#[test]
fn missing_upstream_artifact_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config_in(tmp.path());
    run_pipeline(&cfg, &stages("ingest,stressor,augment,qc")).unwrap();
    fs::remove_file(cfg.paths.output.join("stressor/stressors.jsonl")).unwrap();
    match run_pipeline(&cfg, &stages("features")).unwrap_err() {
        e @ PipelineError::MissingArtifact { .. } => {
            assert_eq!(e.exit_code(), 1);
            let msg = e.to_string();
            assert!(msg.contains("stressors.jsonl") && msg.contains("stressor"), "{msg}");
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn stage_subset_without_upstream_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config_in(tmp.path());
    let err = run_pipeline(&cfg, &stages("train")).unwrap_err();
    assert!(matches!(err, PipelineError::MissingArtifact { upstream: Stage::Features, .. }), "{err}");
}

#[test]
fn invalid_config_is_rejected_before_running() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config_in(tmp.path());
    cfg.qc.kappa_threshold = 1.5;
    let err = run_pipeline(&cfg, &all()).unwrap_err();
    assert!(matches!(err, PipelineError::Config(ConfigError::Invalid(_))), "{err}");
    assert_eq!(err.exit_code(), 1);
    assert!(!cfg.paths.output.exists());

    let mut cfg = config_in(tmp.path());
    cfg.paths.corpus = tmp.path().join("missing.jsonl");
    let err = run_pipeline(&cfg, &all()).unwrap_err();
    assert!(matches!(err, PipelineError::Config(ConfigError::MissingPath { field: "paths.corpus", .. })));
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn unknown_config_keys_and_stages_are_rejected() {
    let base = fixtures();
    let text = fs::read_to_string(base.join("pipeline.toml")).unwrap();
    let err = PipelineConfig::from_toml(&format!("{text}\n[qc2]\nx = 1\n"), &base).unwrap_err();
    assert!(err.to_string().contains("qc2"), "{err}");
    assert!(Stage::parse_list("ingest,bogus").is_err());
}

#[test]
fn rejected_batches_halt_with_exit_code_3() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config_in(tmp.path());
    cfg.qc.halt_on_reject = true;
    // the stub annotator cannot reach this agreement
    cfg.qc.kappa_threshold = 0.99;
    let err = run_pipeline(&cfg, &all()).unwrap_err();
    assert!(matches!(err, PipelineError::QcHalt { .. }), "{err}");
    assert_eq!(err.exit_code(), 3);
    let qc = cfg.paths.output.join("qc");
    assert!(qc.join("qc_summary.txt").is_file());
    assert!(!qc.join("manifest.json").exists());
    assert!(!qc.join("accepted.jsonl").exists());
    assert!(!cfg.paths.output.join("features").exists());
}

#[test]
fn relative_paths_resolve_against_the_config_file() {
    let cfg = PipelineConfig::load(&fixtures().join("pipeline.toml")).unwrap();
    assert!(cfg.paths.corpus.starts_with(fixtures()));
    cfg.validate().unwrap();
}
