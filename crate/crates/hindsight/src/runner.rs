//! End-to-end orchestration: run configuration, backend assembly, the batch
//! loop with per-batch persistence, a standalone forecast scorer, and bank
//! inspection with ledger-reconstructed weight trajectories.
//!
//! A run's output directory holds everything needed to reproduce and audit
//! it: `manifest.json` (the exact configuration and inputs),
//! `experiences.jsonl` and `meta_guidelines.jsonl` (the banks, rewritten
//! after every batch), `ledger.jsonl` (one record per task with both
//! forecasts, both scores, the gain, and every weight update), and
//! `reports.jsonl` / `reports.csv` (the weekly series).

use std::env;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cognition::{ScriptedBackend, TranscriptError};
use crate::embedding::TokenHashEmbedder;
use crate::evolution::{
    ContrastiveResult, EngineBackends, EngineOptions, EvolutionConfig, EvolutionEngine,
    EvolutionError,
};
use crate::live::{HttpChatBackend, HttpEmbedder, LiveSearchBackend};
use crate::memory::{Experience, ExperienceBank, MemoryError, MetaGuidelineBank};
use crate::metrics::{self, MetricsError, TaskScore, UtilityPolicy, WeeklyReport};
use crate::predictor::{Forecast, NullSearchBackend};
use crate::stream::{load_stream, write_stream, StreamError, SuggestedConfig, SyntheticBundle};

/// Environment variable holding the chat backend's API key (live mode).
pub const ENV_CHAT_API_KEY: &str = "HINDSIGHT_CHAT_API_KEY";
/// Environment variable holding the embedding backend's API key (live mode).
pub const ENV_EMBED_API_KEY: &str = "HINDSIGHT_EMBED_API_KEY";
/// Environment variable holding the search backend's API key (live mode).
pub const ENV_SEARCH_API_KEY: &str = "HINDSIGHT_SEARCH_API_KEY";

/// File names inside a run's output directory.
pub const MANIFEST_FILE: &str = "manifest.json";
pub const EXPERIENCES_FILE: &str = "experiences.jsonl";
pub const META_GUIDELINES_FILE: &str = "meta_guidelines.jsonl";
pub const LEDGER_FILE: &str = "ledger.jsonl";
pub const REPORTS_JSONL_FILE: &str = "reports.jsonl";
pub const REPORTS_CSV_FILE: &str = "reports.csv";
/// File names written by the standalone scorer.
pub const PER_TASK_SCORES_FILE: &str = "per_task_scores.csv";
pub const WEEKLY_SCORES_FILE: &str = "weekly_scores.csv";

/// Which backend family a run talks to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendMode {
    /// Real HTTP chat/embedding/search providers; keys from the environment.
    Live,
    /// A recorded transcript and the deterministic embedder; fully offline.
    Scripted,
}

impl FromStr for BackendMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "live" => Ok(BackendMode::Live),
            "scripted" => Ok(BackendMode::Scripted),
            other => Err(format!("unknown mode {other:?}; expected live or scripted")),
        }
    }
}

impl fmt::Display for BackendMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackendMode::Live => write!(f, "live"),
            BackendMode::Scripted => write!(f, "scripted"),
        }
    }
}

/// Endpoints and model names for live mode. Secrets stay in the
/// environment; this struct is persisted verbatim in the manifest.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct LiveSettings {
    pub chat_url: String,
    pub chat_model: String,
    pub embed_url: String,
    pub embed_model: String,
    pub search_url: String,
}

/// Full run configuration, loadable from TOML. Every field has a default,
/// so an empty file is a valid config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub evolution: EvolutionConfig,
    pub utility: UtilityPolicy,
    /// Fetched pages longer than this many characters are summarized.
    pub page_char_budget: usize,
    /// Record wall-clock timestamps in trajectories (keep off for
    /// byte-reproducible runs).
    pub record_timestamps: bool,
    /// Optional JSONL experience bank loaded at the start of a fresh run.
    /// Relative paths in a config file resolve against the file's directory.
    pub seed_experiences: Option<PathBuf>,
    /// Required for live mode.
    pub live: Option<LiveSettings>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            evolution: EvolutionConfig::default(),
            utility: UtilityPolicy::default(),
            page_char_budget: 20_000,
            record_timestamps: false,
            seed_experiences: None,
            live: None,
        }
    }
}

impl RunConfig {
    /// Loads a TOML config file, resolving a relative `seed_experiences`
    /// path against the config file's directory.
    pub fn load(path: &Path) -> Result<Self, RunnerError> {
        if !path.exists() {
            return Err(RunnerError::NotFound {
                what: "config",
                path: path.to_path_buf(),
            });
        }
        let text = fs::read_to_string(path).map_err(|source| RunnerError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config: RunConfig = toml::from_str(&text)
            .map_err(|err| RunnerError::Config(format!("{}: {err}", path.display())))?;
        if let Some(seed) = &config.seed_experiences {
            if seed.is_relative() {
                if let Some(dir) = path.parent() {
                    config.seed_experiences = Some(dir.join(seed));
                }
            }
        }
        Ok(config)
    }

    /// Applies the generator-suggested hyperparameters of a synthetic
    /// stream onto this config.
    pub fn apply_suggestions(&mut self, suggested: &SuggestedConfig) {
        self.evolution.retrieval_threshold = suggested.retrieval_threshold;
        self.evolution.top_k = suggested.top_k;
        self.evolution.bad_case_fraction = suggested.bad_case_fraction;
        self.evolution.min_improvement = suggested.min_improvement;
    }
}

/// Everything needed to reproduce a run, written to `manifest.json` before
/// the first batch is processed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: RunConfig,
    pub stream_path: String,
    pub backend_mode: BackendMode,
    pub transcript_path: Option<String>,
    pub out_dir: String,
    pub experiences_file: String,
    pub meta_guidelines_file: String,
    pub ledger_file: String,
    pub reports_file: String,
    pub start_batch: Option<u32>,
    pub end_batch: Option<u32>,
}

/// One ledger line: a contrastive result stamped with its batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerRecord {
    pub batch_id: u32,
    #[serde(flatten)]
    pub result: ContrastiveResult,
}

/// Inputs of [`run`].
#[derive(Debug, Clone)]
pub struct RunRequest {
    pub stream_path: PathBuf,
    pub config: RunConfig,
    pub mode: BackendMode,
    /// Required in scripted mode.
    pub transcript_path: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// First batch id to process (inclusive). When set and the output
    /// directory already holds banks, the run resumes from them.
    pub start_batch: Option<u32>,
    /// Last batch id to process (inclusive).
    pub end_batch: Option<u32>,
}

/// One processed batch, condensed for display.
#[derive(Debug, Clone, PartialEq)]
pub struct WeekSummary {
    pub batch_id: u32,
    pub n_tasks: usize,
    pub mean_brier_on: f64,
    pub mean_brier_off: f64,
    pub mean_return: f64,
    pub portfolio_value: f64,
    pub committed: usize,
    pub meta_added: usize,
}

/// What [`run`] returns.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub weekly: Vec<WeekSummary>,
    pub out_dir: PathBuf,
}

/// Runner failures. [`RunnerError::exit_code`] maps them onto the CLI's
/// exit-code contract.
#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("{what} not found: {path}")]
    NotFound { what: &'static str, path: PathBuf },
    #[error("config error: {0}")]
    Config(String),
    #[error("missing credential: set the {0} environment variable")]
    MissingCredential(&'static str),
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error(transparent)]
    Transcript(#[from] TranscriptError),
    #[error(transparent)]
    Evolution(#[from] EvolutionError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}:{line}: {message}")]
    MalformedLine {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("forecasts do not match the stream: {0}")]
    ForecastMismatch(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl RunnerError {
    /// Exit-code contract: `2` for configuration, input-file, and
    /// validation problems; `1` for failures inside a run.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunnerError::Evolution(EvolutionError::Config(_)) => 2,
            RunnerError::Evolution(_) | RunnerError::Metrics(_) => 1,
            _ => 2,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunnerError + '_ {
    move |source| RunnerError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_json_pretty<T: Serialize>(path: &Path, value: &T) -> Result<(), RunnerError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|err| RunnerError::Config(format!("serialize {}: {err}", path.display())))?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

/// Reads non-empty lines of a JSONL file into `T`, with line numbers on
/// errors.
fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, RunnerError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: T = serde_json::from_str(line).map_err(|err| RunnerError::MalformedLine {
            path: path.to_path_buf(),
            line: i + 1,
            message: err.to_string(),
        })?;
        rows.push(row);
    }
    Ok(rows)
}

fn build_scripted_backends(transcript_path: &Path) -> Result<EngineBackends, RunnerError> {
    if !transcript_path.exists() {
        return Err(RunnerError::NotFound {
            what: "transcript",
            path: transcript_path.to_path_buf(),
        });
    }
    let scripted = ScriptedBackend::load(transcript_path)?;
    Ok(EngineBackends {
        chat: Arc::new(scripted),
        search: Arc::new(NullSearchBackend),
        embedder: Arc::new(TokenHashEmbedder),
    })
}

fn build_live_backends(settings: &LiveSettings) -> Result<EngineBackends, RunnerError> {
    for (name, value) in [
        ("live.chat_url", &settings.chat_url),
        ("live.chat_model", &settings.chat_model),
        ("live.embed_url", &settings.embed_url),
        ("live.embed_model", &settings.embed_model),
        ("live.search_url", &settings.search_url),
    ] {
        if value.trim().is_empty() {
            return Err(RunnerError::Config(format!(
                "{name} must be set for live mode"
            )));
        }
    }
    let chat_key =
        env::var(ENV_CHAT_API_KEY).map_err(|_| RunnerError::MissingCredential(ENV_CHAT_API_KEY))?;
    let embed_key = env::var(ENV_EMBED_API_KEY)
        .map_err(|_| RunnerError::MissingCredential(ENV_EMBED_API_KEY))?;
    let search_key = env::var(ENV_SEARCH_API_KEY)
        .map_err(|_| RunnerError::MissingCredential(ENV_SEARCH_API_KEY))?;
    Ok(EngineBackends {
        chat: Arc::new(HttpChatBackend::new(
            &settings.chat_url,
            &settings.chat_model,
            chat_key,
        )),
        search: Arc::new(LiveSearchBackend::new(&settings.search_url, search_key)),
        embedder: Arc::new(HttpEmbedder::new(
            &settings.embed_url,
            &settings.embed_model,
            embed_key,
        )),
    })
}

/// Processes a stream end to end, persisting banks, ledger, and reports
/// after every batch so partial progress survives a failure.
pub fn run(request: &RunRequest) -> Result<RunSummary, RunnerError> {
    request.config.evolution.validate()?;
    if !request.stream_path.exists() {
        return Err(RunnerError::NotFound {
            what: "stream",
            path: request.stream_path.clone(),
        });
    }
    let batches = load_stream(&request.stream_path)?;
    let backends = match request.mode {
        BackendMode::Scripted => {
            let path = request.transcript_path.as_ref().ok_or_else(|| {
                RunnerError::Config("scripted mode requires a transcript path".into())
            })?;
            build_scripted_backends(path)?
        }
        BackendMode::Live => {
            let settings = request.config.live.as_ref().ok_or_else(|| {
                RunnerError::Config("live mode requires a [live] config section".into())
            })?;
            build_live_backends(settings)?
        }
    };
    fs::create_dir_all(&request.out_dir).map_err(io_err(&request.out_dir))?;

    let experiences_path = request.out_dir.join(EXPERIENCES_FILE);
    let meta_path = request.out_dir.join(META_GUIDELINES_FILE);
    let ledger_path = request.out_dir.join(LEDGER_FILE);
    let reports_jsonl_path = request.out_dir.join(REPORTS_JSONL_FILE);
    let reports_csv_path = request.out_dir.join(REPORTS_CSV_FILE);

    // A start batch plus existing banks means "continue that run"; anything
    // else is a fresh run that truncates previous outputs.
    let resume = request.start_batch.is_some() && experiences_path.exists();
    let (bank, meta, mut reports) = if resume {
        let bank = ExperienceBank::load(&experiences_path)?;
        let meta = if meta_path.exists() {
            MetaGuidelineBank::load(&meta_path, backends.embedder.as_ref())?
        } else {
            MetaGuidelineBank::new()
        };
        let reports: Vec<WeeklyReport> = if reports_jsonl_path.exists() {
            read_jsonl(&reports_jsonl_path)?
        } else {
            Vec::new()
        };
        (bank, meta, reports)
    } else {
        let bank = match &request.config.seed_experiences {
            Some(seed) => {
                if !seed.exists() {
                    return Err(RunnerError::NotFound {
                        what: "seed experiences",
                        path: seed.clone(),
                    });
                }
                ExperienceBank::load(seed)?
            }
            None => ExperienceBank::new(),
        };
        fs::write(&ledger_path, "").map_err(io_err(&ledger_path))?;
        fs::write(&reports_jsonl_path, "").map_err(io_err(&reports_jsonl_path))?;
        (bank, MetaGuidelineBank::new(), Vec::new())
    };
    let portfolio = reports
        .last()
        .map(|r| r.portfolio_value_after)
        .unwrap_or(0.0);

    let options = EngineOptions {
        utility: request.config.utility,
        page_char_budget: request.config.page_char_budget,
        record_timestamps: request.config.record_timestamps,
    };
    let mut engine = EvolutionEngine::new(
        request.config.evolution.clone(),
        options,
        backends,
        bank,
        meta,
    )?;
    engine.set_portfolio_value(portfolio);

    let manifest = RunManifest {
        config: request.config.clone(),
        stream_path: request.stream_path.display().to_string(),
        backend_mode: request.mode,
        transcript_path: request
            .transcript_path
            .as_ref()
            .map(|p| p.display().to_string()),
        out_dir: request.out_dir.display().to_string(),
        experiences_file: EXPERIENCES_FILE.into(),
        meta_guidelines_file: META_GUIDELINES_FILE.into(),
        ledger_file: LEDGER_FILE.into(),
        reports_file: REPORTS_JSONL_FILE.into(),
        start_batch: request.start_batch,
        end_batch: request.end_batch,
    };
    write_json_pretty(&request.out_dir.join(MANIFEST_FILE), &manifest)?;

    let mut weekly = Vec::new();
    for batch in &batches {
        let batch_id = batch[0].task.batch_id;
        if request.start_batch.is_some_and(|start| batch_id < start) {
            continue;
        }
        if request.end_batch.is_some_and(|end| batch_id > end) {
            continue;
        }
        let outcome = engine.process_batch(batch)?;

        let mut ledger_lines = String::new();
        for result in &outcome.results {
            let record = LedgerRecord {
                batch_id,
                result: result.clone(),
            };
            ledger_lines.push_str(
                &serde_json::to_string(&record).expect("ledger records serialize infallibly"),
            );
            ledger_lines.push('\n');
        }
        let mut ledger_file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&ledger_path)
            .map_err(io_err(&ledger_path))?;
        ledger_file
            .write_all(ledger_lines.as_bytes())
            .map_err(io_err(&ledger_path))?;

        engine.experiences().save(&experiences_path)?;
        engine.meta_guidelines().save(&meta_path)?;
        reports.push(outcome.weekly_report.clone());
        metrics::write_reports_jsonl(&reports_jsonl_path, &reports)?;
        metrics::write_reports_csv(&reports_csv_path, &reports)?;

        let mean_brier_off = outcome
            .results
            .iter()
            .map(|r| r.score_off.brier)
            .sum::<f64>()
            / outcome.results.len() as f64;
        weekly.push(WeekSummary {
            batch_id,
            n_tasks: outcome.weekly_report.n_tasks,
            mean_brier_on: outcome.weekly_report.mean_brier,
            mean_brier_off,
            mean_return: outcome.weekly_report.mean_return,
            portfolio_value: outcome.weekly_report.portfolio_value_after,
            committed: outcome.committed_experience_ids.len(),
            meta_added: outcome.added_meta_guideline_ids.len(),
        });
    }

    Ok(RunSummary {
        weekly,
        out_dir: request.out_dir.clone(),
    })
}

/// One scored task of an external forecast file.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerTaskScore {
    pub task_id: String,
    pub batch_id: u32,
    pub brier: f64,
    pub market_return: Option<f64>,
}

/// What [`score_forecasts`] computed and wrote.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreOutput {
    pub per_task: Vec<PerTaskScore>,
    pub weekly: Vec<WeeklyReport>,
}

/// Parses a forecasts JSONL file. Two formats are accepted per line:
/// a run ledger record (the `forecast_on` probabilities are scored) or a
/// plain `{"task_id", "probs"}` object.
fn read_forecasts(path: &Path) -> Result<Vec<(String, Forecast)>, RunnerError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let malformed = |line: usize, message: String| RunnerError::MalformedLine {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut rows: Vec<(String, Forecast)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = i + 1;
        let value: serde_json::Value =
            serde_json::from_str(line).map_err(|err| malformed(line_no, err.to_string()))?;
        let object = value
            .as_object()
            .ok_or_else(|| malformed(line_no, "expected a JSON object".into()))?;
        let task_id = object
            .get("task_id")
            .and_then(|v| v.as_str())
            .ok_or_else(|| malformed(line_no, "missing string field task_id".into()))?
            .to_owned();
        let probs_value = object
            .get("forecast_on")
            .or_else(|| object.get("probs"))
            .ok_or_else(|| malformed(line_no, "missing field probs (or forecast_on)".into()))?;
        let probs: Vec<f64> = serde_json::from_value(probs_value.clone())
            .map_err(|err| malformed(line_no, format!("probs: {err}")))?;
        let forecast =
            Forecast::from_probs(probs).map_err(|err| malformed(line_no, err.to_string()))?;
        if rows.iter().any(|(id, _)| id == &task_id) {
            return Err(malformed(
                line_no,
                format!("duplicate forecast for task {task_id:?}"),
            ));
        }
        rows.push((task_id, forecast));
    }
    Ok(rows)
}

/// Scores an external forecast file against a stream: per-task Brier and
/// market return, weekly means, and cumulative portfolio value (default
/// stake). Writes `per_task_scores.csv` and `weekly_scores.csv` into
/// `out_dir`. Tasks are scored in ascending task-id order within each
/// batch — the engine's own order — so scoring a run's ledger reproduces
/// that run's weekly report exactly.
pub fn score_forecasts(
    forecasts_path: &Path,
    stream_path: &Path,
    out_dir: &Path,
) -> Result<ScoreOutput, RunnerError> {
    if !forecasts_path.exists() {
        return Err(RunnerError::NotFound {
            what: "forecasts",
            path: forecasts_path.to_path_buf(),
        });
    }
    if !stream_path.exists() {
        return Err(RunnerError::NotFound {
            what: "stream",
            path: stream_path.to_path_buf(),
        });
    }
    let batches = load_stream(stream_path)?;
    let forecasts = read_forecasts(forecasts_path)?;

    let mut known_ids: Vec<&str> = Vec::new();
    for batch in &batches {
        for stream_task in batch {
            known_ids.push(&stream_task.task.id);
        }
    }
    let missing: Vec<&str> = known_ids
        .iter()
        .filter(|id| !forecasts.iter().any(|(fid, _)| fid == *id))
        .copied()
        .collect();
    let unknown: Vec<&str> = forecasts
        .iter()
        .map(|(id, _)| id.as_str())
        .filter(|id| !known_ids.contains(id))
        .collect();
    if !missing.is_empty() || !unknown.is_empty() {
        let mut parts = Vec::new();
        if !missing.is_empty() {
            parts.push(format!("missing forecasts for tasks {missing:?}"));
        }
        if !unknown.is_empty() {
            parts.push(format!("forecasts for unknown tasks {unknown:?}"));
        }
        return Err(RunnerError::ForecastMismatch(parts.join("; ")));
    }

    let stake = EvolutionConfig::default().stake_per_week;
    let mut per_task = Vec::new();
    let mut weekly = Vec::new();
    let mut portfolio = 0.0;
    for batch in &batches {
        let batch_id = batch[0].task.batch_id;
        let mut ordered: Vec<_> = batch.iter().collect();
        ordered.sort_by(|a, b| a.task.id.cmp(&b.task.id));
        let mut scores: Vec<TaskScore> = Vec::new();
        for stream_task in ordered {
            let task = &stream_task.task;
            let (_, forecast) = forecasts
                .iter()
                .find(|(id, _)| id == &task.id)
                .expect("coverage verified above");
            let score = metrics::score_task(
                UtilityPolicy::NegBrier,
                &task.id,
                forecast,
                task.market_prices.as_deref(),
                &stream_task.outcome,
            )?;
            per_task.push(PerTaskScore {
                task_id: score.task_id.clone(),
                batch_id,
                brier: score.brier,
                market_return: score.market_return,
            });
            scores.push(score);
        }
        let report = metrics::build_weekly_report(batch_id, &scores, portfolio, stake)?;
        portfolio = report.portfolio_value_after;
        weekly.push(report);
    }

    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let per_task_path = out_dir.join(PER_TASK_SCORES_FILE);
    let mut csv = String::from("task_id,batch_id,brier,market_return\n");
    for row in &per_task {
        let ret = row.market_return.map(|r| r.to_string()).unwrap_or_default();
        csv.push_str(&format!(
            "{},{},{},{}\n",
            row.task_id, row.batch_id, row.brier, ret
        ));
    }
    fs::write(&per_task_path, csv).map_err(io_err(&per_task_path))?;
    metrics::write_reports_csv(&out_dir.join(WEEKLY_SCORES_FILE), &weekly)?;

    Ok(ScoreOutput { per_task, weekly })
}

/// File names written by [`write_synthetic_bundle`].
pub const SYNTH_STREAM_FILE: &str = "stream.jsonl";
pub const SYNTH_TRANSCRIPT_FILE: &str = "transcript.jsonl";
pub const SYNTH_SEED_EXPERIENCES_FILE: &str = "seed_experiences.jsonl";
pub const SYNTH_EXPECTED_FILE: &str = "expected.jsonl";
pub const SYNTH_CONFIG_FILE: &str = "config.toml";

/// Writes a generated synthetic bundle as a ready-to-run directory:
/// the stream, the matching scripted transcript, the seed experience bank,
/// the per-task expectations ledger, and a `config.toml` carrying the
/// generator-suggested hyperparameters with `seed_experiences` pre-wired.
pub fn write_synthetic_bundle(out_dir: &Path, bundle: &SyntheticBundle) -> Result<(), RunnerError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    write_stream(&out_dir.join(SYNTH_STREAM_FILE), &bundle.batches)?;

    let transcript_path = out_dir.join(SYNTH_TRANSCRIPT_FILE);
    let mut transcript_text = String::new();
    for entry in &bundle.transcript {
        transcript_text.push_str(
            &serde_json::to_string(entry).expect("transcript entries serialize infallibly"),
        );
        transcript_text.push('\n');
    }
    fs::write(&transcript_path, transcript_text).map_err(io_err(&transcript_path))?;

    let mut seed_bank = ExperienceBank::new();
    for experience in &bundle.seed_experiences {
        seed_bank.add(experience.clone())?;
    }
    seed_bank.save(&out_dir.join(SYNTH_SEED_EXPERIENCES_FILE))?;

    let expected_path = out_dir.join(SYNTH_EXPECTED_FILE);
    let mut expected_text = String::new();
    for row in &bundle.expected {
        expected_text
            .push_str(&serde_json::to_string(row).expect("expected rows serialize infallibly"));
        expected_text.push('\n');
    }
    fs::write(&expected_path, expected_text).map_err(io_err(&expected_path))?;

    let mut config = RunConfig::default();
    config.apply_suggestions(&bundle.suggested_config);
    config.seed_experiences = Some(PathBuf::from(SYNTH_SEED_EXPERIENCES_FILE));
    let config_path = out_dir.join(SYNTH_CONFIG_FILE);
    let config_text = toml::to_string_pretty(&config)
        .map_err(|err| RunnerError::Config(format!("serialize config: {err}")))?;
    fs::write(&config_path, config_text).map_err(io_err(&config_path))?;
    Ok(())
}

/// Reconstructs, from the ledger, each experience's weight after every
/// batch in which it was retrieved: `(batch_id, weight at batch end)`.
fn weight_trajectories(
    ledger: &[LedgerRecord],
) -> std::collections::BTreeMap<String, Vec<(u32, f64)>> {
    let mut trajectories: std::collections::BTreeMap<String, Vec<(u32, f64)>> =
        std::collections::BTreeMap::new();
    for record in ledger {
        for update in &record.result.weight_updates {
            let steps = trajectories
                .entry(update.experience_id.clone())
                .or_default();
            match steps.last_mut() {
                Some((batch, weight)) if *batch == record.batch_id => {
                    *weight = update.weight_after;
                }
                _ => steps.push((record.batch_id, update.weight_after)),
            }
        }
    }
    trajectories
}

fn render_experience(
    out: &mut String,
    experience: &Experience,
    trajectory: Option<&Vec<(u32, f64)>>,
) {
    out.push_str(&format!(
        "{}  weight {}  retrieved {}  cumulative_gain {}  created_batch {}\n",
        experience.id,
        experience.weight,
        experience.times_retrieved,
        experience.cumulative_gain,
        experience.created_batch
    ));
    out.push_str(&format!("    {}\n", experience.improvement));
    match trajectory {
        Some(steps) if !steps.is_empty() => {
            let rendered: Vec<String> = steps
                .iter()
                .map(|(batch, weight)| format!("b{batch:03} {weight}"))
                .collect();
            out.push_str(&format!("    weekly weights: {}\n", rendered.join(" | ")));
        }
        _ => out.push_str("    never retrieved\n"),
    }
}

/// Renders a human-readable view of a run directory: top and bottom
/// experiences by weight, with per-batch weight trajectories rebuilt from
/// the ledger. With `experience_id`, renders just that experience.
pub fn inspect(out_dir: &Path, experience_id: Option<&str>) -> Result<String, RunnerError> {
    let bank_path = out_dir.join(EXPERIENCES_FILE);
    if !bank_path.exists() {
        return Err(RunnerError::NotFound {
            what: "experience bank",
            path: bank_path,
        });
    }
    let ledger_path = out_dir.join(LEDGER_FILE);
    if !ledger_path.exists() {
        return Err(RunnerError::NotFound {
            what: "ledger",
            path: ledger_path,
        });
    }
    let bank = ExperienceBank::load(&bank_path)?;
    let ledger: Vec<LedgerRecord> = read_jsonl(&ledger_path)?;
    let trajectories = weight_trajectories(&ledger);

    let mut out = String::new();
    if let Some(id) = experience_id {
        let experience = bank
            .get(id)
            .ok_or_else(|| RunnerError::Config(format!("experience {id:?} is not in the bank")))?;
        render_experience(&mut out, experience, trajectories.get(id));
        return Ok(out);
    }

    if bank.is_empty() {
        out.push_str("no experiences\n");
        return Ok(out);
    }

    let mut by_weight: Vec<&Experience> = bank.iter().collect();
    by_weight.sort_by(|a, b| {
        b.weight
            .partial_cmp(&a.weight)
            .expect("weights are finite")
            .then_with(|| a.id.cmp(&b.id))
    });
    out.push_str(&format!("experiences: {}\n", by_weight.len()));
    if by_weight.len() <= 10 {
        out.push_str("\nby weight (highest first):\n");
        for experience in &by_weight {
            render_experience(&mut out, experience, trajectories.get(&experience.id));
        }
    } else {
        out.push_str("\ntop 5 by weight:\n");
        for experience in by_weight.iter().take(5) {
            render_experience(&mut out, experience, trajectories.get(&experience.id));
        }
        out.push_str("\nbottom 5 by weight:\n");
        for experience in by_weight.iter().rev().take(5).rev() {
            render_experience(&mut out, experience, trajectories.get(&experience.id));
        }
    }
    Ok(out)
}
