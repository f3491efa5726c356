use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use semenet::pipeline::Split;

mod commands;
mod config;

#[derive(Debug, Parser)]
#[command(name = "semenet", version, about = "Cascaded SE + MoEx chest-radiograph classifiers, end to end")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    args: Args,
}

/// Flags shared by every subcommand. Each overrides its config counterpart.
#[derive(Debug, Clone, clap::Args)]
pub struct Args {
    /// JSON configuration of the subcommand.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Every output is written below this directory.
    #[arg(long, global = true, default_value = "run")]
    pub run_dir: PathBuf,
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, global = true, value_parser = parse_split)]
    pub split: Option<Split>,
    #[arg(long, global = true)]
    pub image: Option<PathBuf>,
    /// Target class index.
    #[arg(long, global = true)]
    pub class: Option<usize>,
    /// Report undecodable images instead of aborting.
    #[arg(long, global = true)]
    pub skip_bad: bool,
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse().map_err(|e: semenet::Error| e.to_string())
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Render a synthetic dataset with masks and a manifest.
    GenData,
    /// Index a class-per-directory image tree and split it.
    Ingest,
    /// Train a classifier.
    Train,
    /// Score a checkpoint on one split.
    Eval,
    /// Train a U-Net lung segmenter.
    SegmentTrain,
    /// Predict lung masks for an image or a split.
    Segment,
    /// Grad-CAM heatmap and overlay for one image.
    Explain,
    /// Two-stage prediction for an image or a split.
    Cascade,
    /// Finite-difference check of every differentiable op.
    Gradcheck,
    /// Hash-and-cluster study of the image distribution.
    AnalyzeDist,
    /// Train and compare the four ablation variants.
    Ablate,
}

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, configuration or inputs: exit code 1.
    Validation(String),
    /// Anything else: exit code 2.
    Runtime(String),
}

impl From<semenet::Error> for CliError {
    fn from(e: semenet::Error) -> Self {
        if e.is_validation() {
            CliError::Validation(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let a = &cli.args;
    let result = match cli.command {
        Command::GenData => commands::gen_data(a),
        Command::Ingest => commands::ingest(a),
        Command::Train => commands::train(a, false),
        Command::Eval => commands::eval(a),
        Command::SegmentTrain => commands::train(a, true),
        Command::Segment => commands::segment(a),
        Command::Explain => commands::explain(a),
        Command::Cascade => commands::cascade(a),
        Command::Gradcheck => commands::gradcheck(a),
        Command::AnalyzeDist => commands::analyze_dist(a),
        Command::Ablate => commands::ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
