//! Operator command line: run an evolution over a task stream, inspect the
//! resulting banks, score forecast files, and generate synthetic streams.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hindsight::runner::{self, BackendMode, RunConfig, RunRequest, RunnerError};
use hindsight::stream::{self, SyntheticSpec};

#[derive(Parser)]
#[command(
    name = "hindsight",
    version,
    about = "Self-evolving experience memory for task-stream forecasting agents"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Process a task stream batch by batch, evolving the experience and
    /// meta-guideline banks and writing ledgers and weekly reports.
    Run {
        /// Task stream (JSONL).
        #[arg(long)]
        stream: PathBuf,
        /// TOML run configuration; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Backend mode: live or scripted.
        #[arg(long, default_value = "scripted")]
        mode: String,
        /// Recorded backend transcript (required in scripted mode).
        #[arg(long)]
        transcript: Option<PathBuf>,
        /// Output directory for banks, ledger, reports, and manifest.
        #[arg(long)]
        out: PathBuf,
        /// First batch id to process (inclusive); with existing outputs,
        /// resumes from the persisted banks.
        #[arg(long)]
        start_batch: Option<u32>,
        /// Last batch id to process (inclusive).
        #[arg(long)]
        end_batch: Option<u32>,
    },
    /// Show experiences by weight, with weekly weight trajectories
    /// reconstructed from the run ledger.
    Inspect {
        /// A run's output directory.
        #[arg(long)]
        out: PathBuf,
        /// Show a single experience instead of the top/bottom view.
        #[arg(long)]
        experience_id: Option<String>,
    },
    /// Score a forecasts file (plain `{"task_id","probs"}` lines or a run
    /// ledger) against a stream, writing per-task and weekly CSVs.
    Score {
        /// Forecasts to score: plain JSONL or a run ledger.
        #[arg(long)]
        forecasts: PathBuf,
        /// The task stream the forecasts answer (JSONL).
        #[arg(long)]
        stream: PathBuf,
        /// Output directory for the score CSVs.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic drifting stream with a matching scripted
    /// transcript, seed experiences, expectations, and run config.
    Synth {
        /// Generator parameters (JSON).
        #[arg(long)]
        spec: PathBuf,
        /// Output directory for the bundle.
        #[arg(long)]
        out: PathBuf,
    },
}

/// A command failure: exit code (1 internal, 2 input/config) + diagnostic.
struct Failure {
    code: u8,
    message: String,
}

impl From<RunnerError> for Failure {
    fn from(err: RunnerError) -> Self {
        Failure {
            code: err.exit_code() as u8,
            message: err.to_string(),
        }
    }
}

fn input_error(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {}", failure.message);
            ExitCode::from(failure.code)
        }
    }
}

fn execute(command: Command) -> Result<(), Failure> {
    match command {
        Command::Run {
            stream,
            config,
            mode,
            transcript,
            out,
            start_batch,
            end_batch,
        } => cmd_run(
            stream,
            config,
            mode,
            transcript,
            out,
            start_batch,
            end_batch,
        ),
        Command::Inspect { out, experience_id } => cmd_inspect(out, experience_id.as_deref()),
        Command::Score {
            forecasts,
            stream,
            out,
        } => cmd_score(forecasts, stream, out),
        Command::Synth { spec, out } => cmd_synth(spec, out),
    }
}

fn cmd_run(
    stream: PathBuf,
    config: Option<PathBuf>,
    mode: String,
    transcript: Option<PathBuf>,
    out: PathBuf,
    start_batch: Option<u32>,
    end_batch: Option<u32>,
) -> Result<(), Failure> {
    let mode: BackendMode = mode.parse().map_err(input_error)?;
    let config = match config {
        Some(path) => RunConfig::load(&path)?,
        None => RunConfig::default(),
    };
    let request = RunRequest {
        stream_path: stream,
        config,
        mode,
        transcript_path: transcript,
        out_dir: out,
        start_batch,
        end_batch,
    };
    let summary = runner::run(&request)?;
    for week in &summary.weekly {
        println!(
            "week {}: tasks={} brier_on={:.4} brier_off={:.4} return={:+.4} \
             portfolio={:.2} committed={} meta_added={}",
            week.batch_id,
            week.n_tasks,
            week.mean_brier_on,
            week.mean_brier_off,
            week.mean_return,
            week.portfolio_value,
            week.committed,
            week.meta_added
        );
    }
    println!("outputs in {}", summary.out_dir.display());
    Ok(())
}

fn cmd_inspect(out: PathBuf, experience_id: Option<&str>) -> Result<(), Failure> {
    let report = runner::inspect(&out, experience_id)?;
    print!("{report}");
    Ok(())
}

fn cmd_score(forecasts: PathBuf, stream: PathBuf, out: PathBuf) -> Result<(), Failure> {
    let output = runner::score_forecasts(&forecasts, &stream, &out)?;
    for week in &output.weekly {
        println!(
            "week {}: tasks={} brier={:.4} return={:+.4} portfolio={:.2}",
            week.batch_id,
            week.n_tasks,
            week.mean_brier,
            week.mean_return,
            week.portfolio_value_after
        );
    }
    println!(
        "wrote {} and {} in {}",
        runner::PER_TASK_SCORES_FILE,
        runner::WEEKLY_SCORES_FILE,
        out.display()
    );
    Ok(())
}

fn cmd_synth(spec_path: PathBuf, out: PathBuf) -> Result<(), Failure> {
    if !spec_path.exists() {
        return Err(input_error(format!(
            "spec not found: {}",
            spec_path.display()
        )));
    }
    let text = fs::read_to_string(&spec_path)
        .map_err(|err| input_error(format!("{}: {err}", spec_path.display())))?;
    let spec: SyntheticSpec = serde_json::from_str(&text)
        .map_err(|err| input_error(format!("{}: {err}", spec_path.display())))?;
    let bundle = stream::generate_synthetic(&spec).map_err(|err| input_error(err.to_string()))?;
    runner::write_synthetic_bundle(&out, &bundle)?;
    println!(
        "wrote {}, {}, {}, {}, {} in {} ({} batches x {} tasks)",
        runner::SYNTH_STREAM_FILE,
        runner::SYNTH_TRANSCRIPT_FILE,
        runner::SYNTH_SEED_EXPERIENCES_FILE,
        runner::SYNTH_EXPECTED_FILE,
        runner::SYNTH_CONFIG_FILE,
        out.display(),
        spec.n_batches,
        spec.tasks_per_batch
    );
    Ok(())
}
