mod commands;
mod config;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

/// Environment variable naming the default output directory.
pub const OUTPUT_ENV: &str = "DTAM_OUTPUT_DIR";

#[derive(Parser, Debug)]
#[command(name = "dtam", about = "Dynamic topic attention model pipeline", disable_version_flag = true)]
pub struct Cli {
    /// Settings file of `key = value` lines under `[section]` headers.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override as `section.key=value`; repeatable, applied after the file.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory [default: $DTAM_OUTPUT_DIR or ./dtam-out].
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Upper bound on worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Single-threaded, reproducible run.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Print the checkpoint format version and exit.
    #[arg(long)]
    pub version: bool,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build vocabularies and the sliced timeline from a JSONL corpus.
    Ingest {
        #[arg(long)]
        input: PathBuf,
    },
    /// Train a model on the ingested history; writes a checkpoint and history CSV.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train every cell of the `[grid]` section and rank by validation RMSE.
    Gridsearch {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score the prediction slices: R², PPL-DC, PPL-P and topic coherence.
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Forecast ratings for a JSONL file of future documents.
    Predict {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Top words per topic.
    Topics {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 30)]
        n: usize,
    },
    /// Per-slice topic proportion mean and two-standard-deviation band as CSV.
    Timeline {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Sample a synthetic corpus from the `[sample]` section.
    Sample,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if cli.version {
        println!(
            "dtam {} (checkpoint format {})",
            env!("CARGO_PKG_VERSION"),
            dtam::checkpoint::CHECKPOINT_FORMAT_VERSION
        );
        return ExitCode::SUCCESS;
    }
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
