//! `t2m`: data generation, perturbation, training, fine-tuning, evaluation
//! and reporting for the toy text-to-motion world.

mod commands;
mod config;
mod error;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "t2m",
    version,
    about = "Stable-attention fine-tuning for a toy text-to-motion model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command that reads configuration.
#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; command-line flags take precedence.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Seed for all randomness of this command.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Synonym lexicon file (`class_id,pos,canonical,syn|syn` lines);
    /// defaults to the built-in toy lexicon.
    #[arg(long, value_name = "FILE")]
    lexicon: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic caption/motion corpus.
    GenData(GenData),
    /// Add a synonym-replaced caption to every record of a corpus.
    Perturb(Perturb),
    /// Summarize the perturbations of a corpus.
    Stats(Stats),
    /// Train a model on the autoregressive loss only.
    TrainBase(TrainBase),
    /// Fine-tune a trained model with the stability objective.
    Finetune(Finetune),
    /// Evaluate a checkpoint on original and perturbed captions.
    Eval(Eval),
    /// Compare evaluation reports and emit tables and scatter data.
    Report(Report),
}

#[derive(Args)]
struct GenData {
    #[command(flatten)]
    common: Common,
    /// Number of records.
    #[arg(long, default_value_t = 2000)]
    size: usize,
    /// Output corpus (JSON lines).
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Chance that a generated word is a synonym instead of the canonical word.
    #[arg(long)]
    synonym_rate: Option<f64>,
    /// Number of motion tokens.
    #[arg(long)]
    codebook_size: Option<usize>,
}

#[derive(Args)]
struct Perturb {
    #[command(flatten)]
    common: Common,
    /// Input corpus.
    #[arg(long = "in", value_name = "FILE")]
    input: PathBuf,
    /// Output corpus with perturbed captions.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Chance that the walk replaces a tagged word it visits.
    #[arg(long)]
    replace_prob: Option<f64>,
}

#[derive(Args)]
struct Stats {
    #[command(flatten)]
    common: Common,
    /// Corpus with perturbed captions.
    #[arg(long = "in", value_name = "FILE")]
    input: PathBuf,
    /// Write the full report as JSON.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    /// Write the summary rates as CSV.
    #[arg(long, value_name = "FILE")]
    csv: Option<PathBuf>,
}

/// Optimizer flags shared by training and fine-tuning.
#[derive(Args)]
struct Optim {
    /// Number of optimizer steps.
    #[arg(long)]
    iterations: Option<usize>,
    /// Records per step.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Peak learning rate.
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Linear warm-up steps.
    #[arg(long)]
    warmup: Option<usize>,
    /// Decoupled weight decay.
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Directory for periodic checkpoints.
    #[arg(long, value_name = "DIR")]
    checkpoint_dir: Option<PathBuf>,
    /// Checkpoint period in steps (0 disables).
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Keep the checkpoint with the lowest validation fid + fid_d.
    #[arg(long)]
    select_best: bool,
    /// Training trace CSV; defaults to `<out>.trace.csv`.
    #[arg(long, value_name = "FILE")]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct TrainBase {
    #[command(flatten)]
    common: Common,
    /// Training corpus.
    #[arg(long, value_name = "FILE")]
    data: PathBuf,
    /// Output checkpoint.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    #[command(flatten)]
    optim: Optim,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Rsr,
    Pgd,
}

#[derive(Args)]
struct Finetune {
    #[command(flatten)]
    common: Common,
    /// Corpus; RSR mode needs perturbed captions.
    #[arg(long, value_name = "FILE")]
    data: PathBuf,
    /// Checkpoint to fine-tune; also becomes the frozen teacher.
    #[arg(long, value_name = "FILE")]
    base: PathBuf,
    /// Output checkpoint.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Source of perturbed inputs.
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Weight of the teacher-closeness term.
    #[arg(long)]
    lambda1: Option<f64>,
    /// Weight of the top-k attention term.
    #[arg(long)]
    lambda2: Option<f64>,
    /// Weight of the prediction-robustness term.
    #[arg(long)]
    lambda3: Option<f64>,
    /// Size of the top-k attention sets.
    #[arg(long)]
    k: Option<usize>,
    /// Radius of the embedding perturbation ball.
    #[arg(long)]
    pgd_radius: Option<f64>,
    /// Step size of each ascent step.
    #[arg(long)]
    pgd_step_size: Option<f64>,
    /// Number of ascent steps.
    #[arg(long)]
    pgd_steps: Option<usize>,
    #[command(flatten)]
    optim: Optim,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Args)]
struct Eval {
    #[command(flatten)]
    common: Common,
    /// Corpus with perturbed captions.
    #[arg(long, value_name = "FILE")]
    data: PathBuf,
    /// Checkpoint to evaluate.
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    /// Output report (JSON).
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Also write the metrics as a one-row CSV.
    #[arg(long, value_name = "FILE")]
    csv: Option<PathBuf>,
    /// Records to evaluate.
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Worker threads; results do not depend on this.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct Report {
    /// Evaluation reports; the first is the baseline for deltas.
    #[arg(long, num_args = 1.., required = true, value_name = "FILE")]
    compare: Vec<PathBuf>,
    /// Comma-separated row labels; defaults to the file stems.
    #[arg(long, value_delimiter = ',')]
    labels: Vec<String>,
    /// Perturbation statistics report (JSON from `stats --out`).
    #[arg(long, value_name = "FILE")]
    stats: Option<PathBuf>,
    /// Directory for the table, CSV and scatter files.
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 3 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
