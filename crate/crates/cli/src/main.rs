use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use octmh_cli::{execute, CliError, Command, ExperimentConfig, Overrides};

#[derive(Parser)]
#[command(name = "octmh", version, about = "Macular hole outcome experiments on OCT scans and clinical data")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Generate a synthetic dataset (and optionally an unlabeled corpus).
    SynthGen(Common),
    /// Self-supervised BYOL pretraining of an encoder on a PNG directory.
    PretrainByol(Common),
    /// Train a vision preset for --runs seeds.
    TrainVision(Common),
    /// Fit the clinical-only logistic regression.
    TrainRegression(Common),
    /// Late fusion of vision run predictions with clinical data.
    Fuse(Common),
    /// Aggregate result directories into mean, CI and max per metric.
    Evaluate(Common),
    /// Render markdown, CSV and SVG from an evaluation file.
    Report(Common),
    /// Finite-difference verification of every layer's gradients.
    Gradcheck(Common),
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    /// Base seed; replicate i uses seed + i.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    runs: Option<usize>,
    /// Replicates run concurrently.
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset manifest.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Command input; repeat for several result directories.
    #[arg(long = "input")]
    inputs: Vec<PathBuf>,
}

fn split(sub: Sub) -> (Command, Common) {
    match sub {
        Sub::SynthGen(c) => (Command::SynthGen, c),
        Sub::PretrainByol(c) => (Command::PretrainByol, c),
        Sub::TrainVision(c) => (Command::TrainVision, c),
        Sub::TrainRegression(c) => (Command::TrainRegression, c),
        Sub::Fuse(c) => (Command::Fuse, c),
        Sub::Evaluate(c) => (Command::Evaluate, c),
        Sub::Report(c) => (Command::Report, c),
        Sub::Gradcheck(c) => (Command::Gradcheck, c),
    }
}

fn run(cli: Cli) -> Result<String, CliError> {
    let (cmd, args) = split(cli.command);
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply(Overrides {
        preset: args.preset,
        seed: args.seed,
        runs: args.runs,
        jobs: args.jobs,
        out: args.out,
        dataset: args.dataset,
        inputs: args.inputs,
    });
    execute(cmd, &cfg)
}

fn fail(e: &CliError) -> ExitCode {
    eprintln!("{}", e.to_json_line());
    ExitCode::from(e.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            return fail(&CliError::Usage(first.to_string()));
        }
    };
    match run(cli) {
        Ok(summary) => {
            if !summary.is_empty() {
                println!("{summary}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => fail(&e),
    }
}
