use std::fs;
use std::path::Path;

use ctxrank::config::AppConfig;
use ctxrank::model::{FeatureMode, ScorerModel};
use ctxrank::pipeline::{
    cmd_eval, cmd_simulate, cmd_train, day_file, read_holdout_log, read_train_log, PipelineError,
};

fn small_config(root: &Path) -> AppConfig {
    let overrides: Vec<String> = [
        "world.num_users=30",
        "world.num_items=200",
        "world.sessions_per_day=10",
        "world.num_days=2",
        "world.feed_length=8",
        "features.feed_length=8",
        "world.candidate_pool=20",
        "eval.holdout_days=1",
        "eval.test_sessions=20",
        "train.hidden_dims=[8,4]",
    ]
    .iter()
    .map(|s| s.to_string())
    .chain([
        format!("paths.corpus={}", root.join("corpus.jsonl").display()),
        format!("paths.users={}", root.join("users.jsonl").display()),
        format!("paths.logs={}", root.join("logs").display()),
        format!("paths.models={}", root.join("models").display()),
        format!("paths.reports={}", root.join("reports").display()),
    ])
    .collect();
    AppConfig::load(None, &overrides).unwrap()
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    out
}

#[test]
fn simulate_writes_expected_impression_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let summary = cmd_simulate(&cfg).unwrap();
    assert_eq!(summary.train_impressions, 2 * 10 * 8);
    assert_eq!(summary.holdout_impressions, 10 * 8);
    assert_eq!(read_train_log(&cfg).unwrap().len(), 160);
    assert_eq!(read_holdout_log(&cfg).unwrap().days(), vec![2]);
    assert!(dir.path().join("logs").join(day_file(0)).exists());
}

#[test]
fn simulate_is_byte_identical_across_runs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    cmd_simulate(&small_config(a.path())).unwrap();
    cmd_simulate(&small_config(b.path())).unwrap();
    assert_eq!(read_dir_bytes(&a.path().join("logs")), read_dir_bytes(&b.path().join("logs")));
    for f in ["corpus.jsonl", "users.jsonl"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
    }
}

#[test]
fn missing_output_dir_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.paths.logs = dir.path().join("absent").join("logs");
    let err = cmd_simulate(&cfg).unwrap_err();
    assert!(matches!(err, PipelineError::Io { .. }));
    assert!(err.to_string().contains("absent"), "{err}");
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn train_both_modes_and_zero_rate_keeps_init() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cmd_simulate(&cfg).unwrap();
    let b = cmd_train(&cfg, FeatureMode::Baseline).unwrap();
    let c = cmd_train(&cfg, FeatureMode::Contextual).unwrap();
    assert_eq!(c.input_dim, b.input_dim + 10);
    assert!(b.trajectory_path.exists());
    let text = fs::read_to_string(&c.trajectory_path).unwrap();
    assert!(text.starts_with("day,impressions,ne,background_ctr\n"));

    cfg.train.learning_rate = 0.0;
    let out = cmd_train(&cfg, FeatureMode::Contextual).unwrap();
    let trained = ScorerModel::load(&out.model_path).unwrap();
    let log = read_train_log(&cfg).unwrap();
    let init = ctxrank::model::train(&log, &cfg.train, FeatureMode::Contextual).unwrap().initial_weights;
    assert_eq!(trained, init);
}

#[test]
fn train_without_logs_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let err = cmd_train(&cfg, FeatureMode::Baseline).unwrap_err();
    assert!(matches!(err, PipelineError::MissingArtifact(_)));
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn eval_reports_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    cmd_simulate(&cfg).unwrap();
    cmd_train(&cfg, FeatureMode::Baseline).unwrap();
    cmd_train(&cfg, FeatureMode::Contextual).unwrap();
    let summary = cmd_eval(&cfg).unwrap();
    let first = read_dir_bytes(&summary.report_dir);
    let names: Vec<&str> = first.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(
        names,
        [
            "calibration_baseline.csv",
            "calibration_baseline.json",
            "calibration_contextual.csv",
            "calibration_contextual.json",
            "comparison.json",
            "comparison.txt",
            "ne.json"
        ]
    );
    cmd_eval(&cfg).unwrap();
    assert_eq!(read_dir_bytes(&summary.report_dir), first);
    assert!(summary.ne.contextual.improvement_pct.is_some());
    assert_eq!(summary.comparison.rankers.len(), 3);
}

#[test]
fn eval_without_models_reports_missing_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    cmd_simulate(&cfg).unwrap();
    match cmd_eval(&cfg) {
        Err(PipelineError::MissingArtifact(p)) => assert!(p.ends_with("baseline.json")),
        other => panic!("unexpected {other:?}"),
    }
}
