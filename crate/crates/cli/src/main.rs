//! `spuriosity` command-line tool.
//!
//! Every subcommand writes under `--out` (or `$SPURIOSITY_OUT`) using the
//! fixed layout `rankings/`, `reports/`, `labels/`, `crops/`. Randomness
//! comes only from `--seed`.

mod annotate;
mod eval;
mod layout;
mod segment;
mod synth;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::layout::OutDir;

#[derive(Debug, Parser)]
#[command(name = "spuriosity", version, about = "Spuriosity rankings, bias measurement and mitigation")]
struct Cli {
    /// Output directory.
    #[arg(long, global = true, env = "SPURIOSITY_OUT", default_value = "out")]
    out: PathBuf,
    /// Seed for every random choice a subcommand makes.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate a dataset bundle and summarise it.
    Ingest(layout::IngestArgs),
    /// Feature importance table, top-k selection and annotation task export.
    Importance(annotate::ImportanceArgs),
    /// Run the annotation API and serve static assets and UI.
    Serve(annotate::ServeArgs),
    /// Write per-class spuriosity rankings.
    Rank(eval::RankArgs),
    /// Spurious gap per model.
    Gap(eval::GapArgs),
    /// Effective robustness across models.
    Effrob(eval::GapArgs),
    /// Correlation of class-wise gaps across models.
    Correlate(eval::GapArgs),
    /// Flag classes with strongly negative gaps for label-noise inspection.
    FlagNoise(eval::FlagNoiseArgs),
    /// Retrain a head on a tuning subset with gap-based early stopping.
    Tune(train::TuneArgs),
    /// Fit a fresh head on the train split.
    FitHead(train::FitHeadArgs),
    /// Square crops around consolidated core masks.
    Crop(segment::CropArgs),
    /// Corrupt the region a spurious feature attends to.
    Corrupt(segment::CorruptArgs),
    /// Accuracy drop between clean and corrupted predictions.
    Sensitivity(segment::SensitivityArgs),
    /// Write a synthetic dataset bundle.
    Synth(synth::SynthArgs),
}

/// Manifest and pooled activations; every data-reading subcommand takes these.
#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub activations: PathBuf,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let out = OutDir::new(cli.out);
    let seed = cli.seed;
    match cli.command {
        Command::Ingest(a) => layout::ingest(&out, &a),
        Command::Importance(a) => annotate::importance(&out, seed, &a),
        Command::Serve(a) => annotate::serve(&out, &a),
        Command::Rank(a) => eval::rank(&out, &a),
        Command::Gap(a) => eval::gap(&out, &a),
        Command::Effrob(a) => eval::effrob(&out, &a),
        Command::Correlate(a) => eval::correlate(&out, &a),
        Command::FlagNoise(a) => eval::flag_noise(&out, &a),
        Command::Tune(a) => train::tune(&out, seed, &a),
        Command::FitHead(a) => train::fit(&out, &a),
        Command::Crop(a) => segment::crop(&out, &a),
        Command::Corrupt(a) => segment::corrupt(&out, seed, &a),
        Command::Sensitivity(a) => segment::sensitivity(&out, &a),
        Command::Synth(a) => synth::synth(seed, &a),
    }
}

fn main() -> ExitCode {
    // clap exits with 2 on usage errors
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
