use std::panic;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod manifest;

/// Label resting-state ICA component maps with a compact MLP.
#[derive(Debug, Parser)]
#[command(name = "rsnlabel", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Read per-subject NIfTI stacks into a dataset cache.
    Ingest(IngestArgs),
    /// Train an MLP on a subject-level split of a dataset.
    Train(TrainArgs),
    /// Score a model on one partition of a dataset.
    Evaluate(EvaluateArgs),
    /// Label every component of one NIfTI stack.
    Predict(PredictArgs),
    /// Layers x nodes grid search with stratified k-fold CV.
    Ablate(AblateArgs),
    /// Write synthetic per-subject stacks.
    Synth(SynthArgs),
    /// Write the RGB projection image of one component.
    Project(ProjectArgs),
    /// Measure inference throughput.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Directory of .nii / .nii.gz stacks, one per subject.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Component label file; the bundled 100-component table if omitted.
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Z-score each component map.
    #[arg(long)]
    pub standardize: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Train,val,test subject fractions.
    #[arg(long, default_value = "0.72,0.08,0.20")]
    pub split: String,
    #[arg(long, default_value_t = 3)]
    pub layers: usize,
    #[arg(long, default_value_t = 200)]
    pub nodes: usize,
    #[arg(long, default_value_t = 0.66)]
    pub dropout: f64,
    /// Hidden layer (1-based) followed by dropout; clamped to --layers.
    #[arg(long, default_value_t = 2)]
    pub dropout_after: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub lr: f64,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// Stop once the epoch mean loss falls below this.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Stop after this many epochs without validation improvement.
    #[arg(long)]
    pub patience: Option<usize>,
    /// inverse_frequency or uniform.
    #[arg(long, default_value = "inverse_frequency")]
    pub weights: String,
    /// Multiplier on the He-normal init scale.
    #[arg(long, default_value_t = 1.0)]
    pub init_gain: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Must match the split used for training.
    #[arg(long, default_value = "0.72,0.08,0.20")]
    pub split: String,
    /// Split seed; the training seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// test, val, train or all.
    #[arg(long, default_value = "test")]
    pub subset: String,
    /// Output prefix for the reports.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub topk: usize,
    /// Z-score each map first; use when the model was trained on standardized data.
    #[arg(long)]
    pub standardize: bool,
    #[arg(long, default_value = "predictions.tsv")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "1,2,3")]
    pub layers_list: String,
    #[arg(long, default_value = "2,5,10,20,50,100,150,200")]
    pub nodes_list: String,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Epoch cap for folds that never reach the loss threshold.
    #[arg(long, default_value_t = 500)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.0005)]
    pub threshold: f64,
    #[arg(long, default_value = "inverse_frequency")]
    pub weights: String,
    #[arg(long, default_value_t = 1.0)]
    pub init_gain: f64,
    /// Output prefix: <out>.csv, <out>.ppm, <out>_folds.csv.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub subjects: usize,
    #[arg(long, default_value = "24,24,24")]
    pub grid: String,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 2.0)]
    pub blob_sigma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ProjectArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub component: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["model", "shape"])))]
pub struct BenchArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Layer widths, input first, e.g. 109350,200,200,200,58.
    #[arg(long)]
    pub shape: Option<String>,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "bench.txt")]
    pub out: PathBuf,
}

/// A failed command: the single line printed to stderr and the exit code.
#[derive(Debug)]
pub struct Failure {
    pub line: String,
    pub code: u8,
}

impl Failure {
    pub fn usage(msg: impl std::fmt::Display) -> Self {
        Failure {
            line: format!("UsageError: {msg}"),
            code: 2,
        }
    }

    pub fn data(name: &str, msg: impl std::fmt::Display) -> Self {
        Failure {
            line: format!("{name}: {msg}"),
            code: 2,
        }
    }
}

impl<E: std::error::Error> From<E> for Failure {
    fn from(e: E) -> Self {
        let text = e.to_string();
        let named = text
            .split_once(": ")
            .is_some_and(|(head, _)| head.starts_with(|c: char| c.is_ascii_uppercase()) && head.chars().all(|c| c.is_ascii_alphanumeric()));
        Failure {
            line: if named { text } else { format!("IoFailure: {text}") },
            code: 2,
        }
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Ingest(a) => commands::ingest(a),
        Command::Train(a) => commands::train(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Predict(a) => commands::predict(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Synth(a) => commands::synth(a),
        Command::Project(a) => commands::project(a),
        Command::Bench(a) => commands::bench(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.render().to_string();
            let head: Vec<&str> = text.lines().take_while(|l| !l.trim().is_empty()).collect();
            eprintln!("UsageError: {}", one_line(head.join(" ").trim_start_matches("error: ")));
            return ExitCode::from(2);
        }
    };
    panic::set_hook(Box::new(|_| {}));
    match panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(f)) => {
            eprintln!("{}", one_line(&f.line));
            ExitCode::from(f.code)
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unexpected failure".into());
            eprintln!("InternalError: {}", one_line(&msg));
            ExitCode::from(3)
        }
    }
}
