//! Experiment stages behind the CLI: simulate, train, eval.
//!
//! On-disk layout, all locations taken from [`Paths`](crate::config::Paths):
//!
//! ```text
//! corpus.jsonl, users.jsonl        world files (users carry ground-truth fatigue)
//! logs/manifest.json               log metadata and the train/holdout day split
//! logs/day_000.jsonl ...           one file of impressions per day
//! models/{baseline,contextual}.json, models/ne_{mode}.csv
//! reports/calibration_{mode}.{json,csv}, reports/ne.json,
//! reports/comparison.{json,txt}
//! ```
//!
//! Output directories are created when their parent exists; a missing parent
//! is an I/O error naming the path.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{AppConfig, ConfigError};
use crate::domain::{LogMetadata, SessionLog};
use crate::eval::{
    calibration_by_bucket, compare_rankers, normalized_entropy, CalibrationReport, ComparisonReport, EvalError,
    NEReport, Ranker, ScoredImpression,
};
use crate::features::FeatureConfig;
use crate::io::{read_items_jsonl, read_log_jsonl, read_users_jsonl, write_items_jsonl, write_jsonl, DataError};
use crate::model::{impression_input, train, DayNe, FeatureMode, ModelError, ScorerModel};
use crate::service::ServiceError;
use crate::simgen::{generate_world, simulate_days_with, test_sessions, SimError, World};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Data {
        path: PathBuf,
        #[source]
        source: DataError,
    },
    #[error("missing artifact {0}")]
    MissingArtifact(PathBuf),
    #[error("no held-out days in the log; set eval.holdout_days > 0 and re-run simulate")]
    NoHoldout,
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Service(#[from] ServiceError),
}

impl PipelineError {
    /// Process exit code: 2 for configuration problems, 3 for data problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Sim(SimError::InvalidConfig(_)) => 2,
            PipelineError::Model(ModelError::InvalidConfig(_)) => 2,
            PipelineError::Io { .. }
            | PipelineError::Data { .. }
            | PipelineError::MissingArtifact(_)
            | PipelineError::NoHoldout
            | PipelineError::Sim(_)
            | PipelineError::Model(_)
            | PipelineError::Eval(_)
            | PipelineError::Service(_) => 3,
        }
    }
}

/// Index of a simulated log directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogManifest {
    pub metadata: LogMetadata,
    /// Days `0..train_days` are for training, the rest are held out.
    pub train_days: u32,
    pub holdout_days: u32,
    pub files: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulateSummary {
    pub seed: u64,
    pub users: usize,
    pub items: usize,
    pub train_impressions: usize,
    pub holdout_impressions: usize,
    pub log_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub mode: FeatureMode,
    pub model_path: PathBuf,
    pub trajectory_path: PathBuf,
    pub impressions: usize,
    pub steps: usize,
    pub input_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NeSummary {
    pub baseline: NEReport,
    pub contextual: NEReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub ne: NeSummary,
    pub calibration_baseline: CalibrationReport,
    pub calibration_contextual: CalibrationReport,
    pub comparison: ComparisonReport,
    pub report_dir: PathBuf,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn data_err(path: &Path) -> impl FnOnce(DataError) -> PipelineError + '_ {
    move |source| PipelineError::Data {
        path: path.to_path_buf(),
        source,
    }
}

/// Creates `dir` if absent. The parent must already exist.
fn ensure_dir(dir: &Path) -> Result<(), PipelineError> {
    if dir.is_dir() {
        return Ok(());
    }
    fs::create_dir(dir).map_err(io_err(dir))
}

fn create(path: &Path) -> Result<BufWriter<File>, PipelineError> {
    File::create(path).map(BufWriter::new).map_err(io_err(path))
}

fn open(path: &Path) -> Result<BufReader<File>, PipelineError> {
    match File::open(path) {
        Ok(f) => Ok(BufReader::new(f)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(PipelineError::MissingArtifact(path.to_path_buf())),
        Err(e) => Err(io_err(path)(e)),
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), PipelineError> {
    fs::write(path, text).map_err(io_err(path))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

/// Feature settings for the configured world.
pub fn feature_config(cfg: &AppConfig) -> FeatureConfig {
    FeatureConfig {
        feed_length: cfg.world.feed_length,
        num_topics: cfg.world.num_topics,
        ..cfg.features
    }
}

pub fn day_file(day: u32) -> String {
    format!("day_{day:03}.jsonl")
}

pub fn model_path(cfg: &AppConfig, mode: FeatureMode) -> PathBuf {
    cfg.paths.models.join(format!("{mode}.json"))
}

/// Generates the world, then writes world files and one log file per day for
/// the training days followed by the held-out days.
pub fn cmd_simulate(cfg: &AppConfig) -> Result<SimulateSummary, PipelineError> {
    cfg.validate()?;
    let world = generate_world(&cfg.world)?;
    let fcfg = feature_config(cfg);
    ensure_dir(&cfg.paths.logs)?;

    write_items_jsonl(&world.items, create(&cfg.paths.corpus)?).map_err(data_err(&cfg.paths.corpus))?;
    write_jsonl(&world.users, create(&cfg.paths.users)?).map_err(data_err(&cfg.paths.users))?;

    let train_days = cfg.world.num_days as u32;
    let holdout_days = cfg.eval.holdout_days as u32;
    let mut files = Vec::new();
    let (mut train_impressions, mut holdout_impressions) = (0, 0);
    let mut metadata = None;
    for day in 0..train_days + holdout_days {
        let log = simulate_days_with(&world, day..day + 1, &fcfg)?;
        let name = day_file(day);
        let path = cfg.paths.logs.join(&name);
        crate::io::write_log_jsonl(&log, create(&path)?).map_err(data_err(&path))?;
        if day < train_days {
            train_impressions += log.len();
        } else {
            holdout_impressions += log.len();
        }
        metadata = Some(log.metadata);
        files.push(name);
    }
    let manifest = LogManifest {
        metadata: metadata.unwrap_or_else(|| cfg.world.log_metadata()),
        train_days,
        holdout_days,
        files,
    };
    write_text(&cfg.paths.logs.join(MANIFEST_FILE), &to_json(&manifest))?;

    Ok(SimulateSummary {
        seed: cfg.world.seed,
        users: world.users.len(),
        items: world.items.len(),
        train_impressions,
        holdout_impressions,
        log_dir: cfg.paths.logs.clone(),
    })
}

pub fn read_manifest(log_dir: &Path) -> Result<LogManifest, PipelineError> {
    let path = log_dir.join(MANIFEST_FILE);
    let reader = open(&path)?;
    serde_json::from_reader(reader).map_err(|e| PipelineError::Data {
        path: path.clone(),
        source: DataError::Parse {
            line: e.line(),
            message: e.to_string(),
        },
    })
}

/// Reads the log files of the days selected by `keep`.
pub fn read_log(log_dir: &Path, keep: impl Fn(u32, &LogManifest) -> bool) -> Result<SessionLog, PipelineError> {
    let manifest = read_manifest(log_dir)?;
    let mut impressions = Vec::new();
    for (day, name) in manifest.files.iter().enumerate() {
        if !keep(day as u32, &manifest) {
            continue;
        }
        let path = log_dir.join(name);
        let log = read_log_jsonl(open(&path)?, manifest.metadata).map_err(data_err(&path))?;
        impressions.extend(log.impressions);
    }
    SessionLog::new(manifest.metadata, impressions).map_err(|e| PipelineError::Data {
        path: log_dir.to_path_buf(),
        source: e.into(),
    })
}

pub fn read_train_log(cfg: &AppConfig) -> Result<SessionLog, PipelineError> {
    read_log(&cfg.paths.logs, |d, m| d < m.train_days)
}

pub fn read_holdout_log(cfg: &AppConfig) -> Result<SessionLog, PipelineError> {
    read_log(&cfg.paths.logs, |d, m| d >= m.train_days)
}

fn trajectory_csv(trajectory: &[DayNe]) -> String {
    let mut out = String::from("day,impressions,ne,background_ctr\n");
    for d in trajectory {
        let _ = writeln!(out, "{},{},{},{}", d.day, d.impressions, d.ne, d.background_ctr);
    }
    out
}

/// Trains one model on the training days and writes it with its per-day NE
/// trajectory.
pub fn cmd_train(cfg: &AppConfig, mode: FeatureMode) -> Result<TrainSummary, PipelineError> {
    cfg.validate()?;
    let log = read_train_log(cfg)?;
    let outcome = train(&log, &cfg.train, mode)?;
    ensure_dir(&cfg.paths.models)?;
    let model_path = model_path(cfg, mode);
    outcome.model.save(&model_path)?;
    let trajectory_path = cfg.paths.models.join(format!("ne_{mode}.csv"));
    write_text(&trajectory_path, &trajectory_csv(&outcome.trajectory))?;
    Ok(TrainSummary {
        mode,
        model_path,
        trajectory_path,
        impressions: log.len(),
        steps: outcome.steps,
        input_dim: outcome.model.input_dim,
    })
}

pub fn load_model(cfg: &AppConfig, mode: FeatureMode) -> Result<ScorerModel, PipelineError> {
    let path = model_path(cfg, mode);
    if !path.exists() {
        return Err(PipelineError::MissingArtifact(path));
    }
    Ok(ScorerModel::load(&path)?)
}

pub fn load_world(cfg: &AppConfig) -> Result<World, PipelineError> {
    let items = read_items_jsonl(open(&cfg.paths.corpus)?).map_err(data_err(&cfg.paths.corpus))?;
    let users = read_users_jsonl(open(&cfg.paths.users)?).map_err(data_err(&cfg.paths.users))?;
    Ok(World {
        config: cfg.world.clone(),
        users,
        items,
    })
}

/// Held-out NE and similarity-bucketed calibration of one model.
pub fn score_holdout(
    model: &ScorerModel,
    log: &SessionLog,
    task: usize,
    edges: &[f64],
) -> Result<(NEReport, CalibrationReport), PipelineError> {
    let mut rows = Vec::with_capacity(log.len());
    for imp in &log.impressions {
        let p = model.forward(&impression_input(imp, model.feature_mode))?.task(task);
        rows.push(ScoredImpression {
            similarity_score: imp.similarity_score,
            prediction: p,
            label: imp.labels[task],
        });
    }
    let preds: Vec<f64> = rows.iter().map(|r| r.prediction).collect();
    let labels: Vec<u8> = rows.iter().map(|r| r.label).collect();
    let mut ne = normalized_entropy(&preds, &labels)?;
    for day in log.days() {
        let idx: Vec<usize> = (0..log.len()).filter(|&i| log.impressions[i].day == day).collect();
        let p: Vec<f64> = idx.iter().map(|&i| preds[i]).collect();
        let y: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
        if let Ok(r) = normalized_entropy(&p, &y) {
            ne.trajectory.push(DayNe {
                day,
                impressions: idx.len(),
                ne: r.ne,
                background_ctr: r.background_ctr,
            });
        }
    }
    let cal = calibration_by_bucket(&rows, edges)?;
    Ok((ne, cal))
}

/// Scores both models on the held-out days and compares slate policies with
/// the simulator's ground truth.
pub fn cmd_eval(cfg: &AppConfig) -> Result<EvalSummary, PipelineError> {
    cfg.validate()?;
    let baseline = load_model(cfg, FeatureMode::Baseline)?;
    let contextual = load_model(cfg, FeatureMode::Contextual)?;
    let holdout = read_holdout_log(cfg)?;
    if holdout.is_empty() {
        return Err(PipelineError::NoHoldout);
    }
    let edges = cfg.eval.bucket_edges();
    let task = cfg.train.objective_task;
    let (ne_b, cal_b) = score_holdout(&baseline, &holdout, task, &edges)?;
    let (ne_c, cal_c) = score_holdout(&contextual, &holdout, task, &edges)?;
    let ne_c = ne_c.against(&ne_b);

    let world = load_world(cfg)?;
    let sessions = test_sessions(&world, cfg.eval.test_sessions)?;
    let rankers = vec![
        ("pointwise".to_string(), Ranker::PointWise),
        (
            "mmr".to_string(),
            Ranker::Mmr {
                lambda: cfg.eval.mmr_lambda,
                depth: cfg.eval.mmr_depth,
            },
        ),
        (
            "contextual".to_string(),
            Ranker::Contextual {
                model: &contextual,
                params: cfg.rerank,
                features: feature_config(cfg),
            },
        ),
    ];
    let comparison = compare_rankers(&world, &sessions, &rankers)?;

    let dir = &cfg.paths.reports;
    ensure_dir(dir)?;
    for (mode, cal) in [("baseline", &cal_b), ("contextual", &cal_c)] {
        write_text(&dir.join(format!("calibration_{mode}.json")), &to_json(cal))?;
        write_text(&dir.join(format!("calibration_{mode}.csv")), &cal.to_csv())?;
    }
    let ne = NeSummary {
        baseline: ne_b,
        contextual: ne_c,
    };
    write_text(&dir.join("ne.json"), &to_json(&ne))?;
    write_text(&dir.join("comparison.json"), &to_json(&comparison))?;
    write_text(&dir.join("comparison.txt"), &comparison.to_table())?;

    Ok(EvalSummary {
        ne,
        calibration_baseline: cal_b,
        calibration_contextual: cal_c,
        comparison,
        report_dir: dir.clone(),
    })
}

/// Runs the request protocol over a file of requests.
pub fn cmd_rerank_file(
    cfg: &AppConfig,
    model: &Path,
    input: &Path,
    output: Option<&Path>,
) -> Result<crate::service::ServeStats, PipelineError> {
    cfg.validate()?;
    let mut service = crate::service::Service::from_model_file(model, cfg)?;
    let reader = open(input)?;
    let stats = match output {
        Some(path) => {
            let mut w = create(path)?;
            let stats = service.run(reader, &mut w).map_err(io_err(path))?;
            w.flush().map_err(io_err(path))?;
            stats
        }
        None => {
            let stdout = std::io::stdout();
            service.run(reader, stdout.lock()).map_err(io_err(Path::new("<stdout>")))?
        }
    };
    Ok(stats)
}
