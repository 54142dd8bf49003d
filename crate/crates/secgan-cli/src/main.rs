//! `secgan` command line: train, evaluate, edit, toygen, plot.

mod commands;
mod manifest;
mod svg;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "secgan", version, about = "Parallel RGB/semantic-mask face-editing GANs")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a run from a config file (plus `--key value` overrides).
    Train(TrainArgs),
    /// Compute the metric report for a finished run.
    Evaluate(EvalArgs),
    /// Translate images with a trained RGB generator.
    Edit(EditArgs),
    /// Generate a procedural toy dataset with exact masks.
    Toygen(ToygenArgs),
    /// Render accuracy bars and consistency-weight sweep figures.
    Plot(PlotArgs),
}

#[derive(Args)]
pub struct TrainArgs {
    /// Path to the key = value config file.
    #[arg(long)]
    config: PathBuf,
    /// Run directory (default: <run_root>/<config hash prefix>).
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Trailing `--key value` pairs overriding config entries.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Run directory produced by `train`.
    #[arg(long)]
    run_dir: PathBuf,
    /// Method name recorded in the report.
    #[arg(long, default_value = "secgan")]
    method: String,
    /// Output directory (default: <run_dir>/eval).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
pub struct EditArgs {
    /// Run directory holding the trained generator.
    #[arg(long)]
    run_dir: PathBuf,
    /// Input image files.
    #[arg(long, required = true, num_args = 1..)]
    input: Vec<PathBuf>,
    /// Attribute to edit (must be in the run's attribute list).
    #[arg(long)]
    attribute: String,
    /// Edit direction: turn the attribute on, off, or keep the zero vector.
    #[arg(long, value_parser = ["on", "off", "zero"])]
    direction: String,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Also write |output - input| difference heatmaps.
    #[arg(long)]
    emit_heatmaps: bool,
    /// Also translate semantic masks with the companion mask generator.
    #[arg(long)]
    emit_masks: bool,
}

#[derive(Args)]
pub struct ToygenArgs {
    /// Optional toy spec file (key = value).
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Number of examples.
    #[arg(long)]
    n: usize,
    /// Output dataset root.
    #[arg(long)]
    out: PathBuf,
    /// Seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Canvas override.
    #[arg(long)]
    canvas: Option<usize>,
}

#[derive(Args)]
pub struct PlotArgs {
    /// One or more report.json files.
    #[arg(long, required = true, num_args = 1..)]
    report: Vec<PathBuf>,
    /// Output directory for figures.
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Train(args) => commands::train(args),
        Cmd::Evaluate(args) => commands::evaluate(args),
        Cmd::Edit(args) => commands::edit(args),
        Cmd::Toygen(args) => commands::toygen(args),
        Cmd::Plot(args) => commands::plot(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
