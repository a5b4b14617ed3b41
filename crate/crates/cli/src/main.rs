//! `sorn`: generate, ingest, train, score, evaluate and plot.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod plots;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::Overrides;

#[derive(Debug, Parser)]
#[command(name = "sorn", version, about = "Cluster-wide task slowdown detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic compound-periodic dataset with labels.
    Generate {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Bin a task event CSV into a distribution series.
    Ingest {
        /// CSV with task_id,end_timestamp,duration_min.
        #[arg(long)]
        events: PathBuf,
        /// Output series CSV; its sidecar JSON is written next to it.
        #[arg(long)]
        out: PathBuf,
        /// First slot start in minutes (default: earliest end time, floored).
        #[arg(long)]
        start: Option<f64>,
        /// End of the last slot in minutes (default: just past the latest end time).
        #[arg(long)]
        end: Option<f64>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Train one model per series file.
    Train {
        /// Series CSV; repeat for several subsets.
        #[arg(long, required = true)]
        series: Vec<PathBuf>,
        /// Output directory. With several series, one subdirectory per file stem.
        #[arg(long)]
        out: PathBuf,
        /// Number of subsets trained at once.
        #[arg(long, default_value_t = 1)]
        parallel_subsets: usize,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Score a series with a trained model.
    Score {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        series: PathBuf,
        /// Output score CSV.
        #[arg(long)]
        out: PathBuf,
        /// Labels CSV, required by the best_f1 policy.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Score only the slots after the training prefix.
        #[arg(long)]
        test_only: bool,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Compare a score CSV against labels.
    Eval {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Checkpoint supplying training scores for the quantile policy.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Metrics JSON; printed to stdout either way.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Check the attention-logit closed forms by quadrature.
    VerifyTheorems {
        /// Report JSON.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Lags per two-tone signal.
        #[arg(long, default_value_t = 100)]
        points: usize,
        /// Simpson intervals per period.
        #[arg(long, default_value_t = 100_000)]
        steps: usize,
        /// Random Fourier signals to check.
        #[arg(long, default_value_t = 20)]
        signals: usize,
        /// Largest accepted relative error.
        #[arg(long, default_value_t = 1e-6)]
        max_error: f64,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Render score, reconstruction and trust traces as SVG.
    ExportPlots {
        #[arg(long)]
        scores: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        labels: Option<PathBuf>,
        /// With --series, adds reconstruction and trust plots.
        #[arg(long, requires = "series")]
        model: Option<PathBuf>,
        #[arg(long, requires = "model")]
        series: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let env_seed = std::env::var(config::SEED_ENV).ok();
    let result = match cli.command {
        Command::Generate { out, overrides } => commands::generate(&out, &overrides, env_seed),
        Command::Ingest {
            events,
            out,
            start,
            end,
            overrides,
        } => commands::ingest(&events, &out, start, end, &overrides, env_seed),
        Command::Train {
            series,
            out,
            parallel_subsets,
            overrides,
        } => commands::train(&series, &out, parallel_subsets, &overrides, env_seed),
        Command::Score {
            model,
            series,
            out,
            labels,
            test_only,
            overrides,
        } => commands::score(&model, &series, &out, labels.as_deref(), test_only, &overrides, env_seed),
        Command::Eval {
            scores,
            labels,
            model,
            out,
            overrides,
        } => commands::eval(&scores, &labels, model.as_deref(), out.as_deref(), &overrides, env_seed),
        Command::VerifyTheorems {
            out,
            points,
            steps,
            signals,
            max_error,
            overrides,
        } => commands::verify_theorems(out.as_deref(), points, steps, signals, max_error, &overrides, env_seed),
        Command::ExportPlots {
            scores,
            out,
            labels,
            model,
            series,
        } => plots::export(&scores, &out, labels.as_deref(), model.as_deref(), series.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {:#}", failure.error());
            ExitCode::from(failure.code())
        }
    }
}
