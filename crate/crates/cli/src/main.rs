//! `shalrt`: train, evaluate, predict, benchmark and sweep SHA-LRT models.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "shalrt", version, about = "Multi-turn joint intent detection and slot filling")]
struct Cli {
    /// Print every configuration key with its default and exit.
    #[arg(long)]
    help_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write checkpoints, a report and a run manifest.
    Train(TrainArgs),
    /// Score a checkpoint on a labelled corpus.
    Eval(EvalArgs),
    /// Print predicted labels for a corpus or free text.
    Predict(PredictArgs),
    /// Measure single-stream inference latency.
    Bench(BenchArgs),
    /// Train once per grid point and write a CSV of scores.
    Sweep(SweepArgs),
    /// Convert a tab-separated CoNLL-style file to JSON lines.
    Convert(ConvertArgs),
    /// Print the resolved configuration as TOML.
    Config(ConfigArgs),
}

#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// TOML config, or a manifest.json from an earlier run to replay it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Start from a named preset: multi_turn or single_turn.
    #[arg(long, conflicts_with = "config")]
    pub preset: Option<String>,
    /// Override one key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub overrides: Vec<String>,
    /// sha (sequential), sha_p (parallel) or basic (no history module).
    #[arg(long)]
    pub variant: Option<String>,
    /// History ablation: full, utterance_only, result_only, result_attention_only, off, cat_all.
    #[arg(long)]
    pub ablation: Option<String>,
    /// Train without the slot-label generation decoder.
    #[arg(long)]
    pub no_slg: bool,
    /// Disable the layer-refined mechanism.
    #[arg(long)]
    pub no_lrm: bool,
    /// Output directory; defaults to data.output_dir, then $SHALRT_OUTPUT_DIR, then ./runs.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Train with this many consecutive seeds and report mean and std.
    #[arg(long, default_value_t = 1)]
    pub repeats: usize,
    /// Suppress per-epoch progress on stderr.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Corpus to score; defaults to the split named by --split.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// train, dev or test, resolved from the checkpoint's data paths.
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Corpus in JSON lines; gold labels are ignored.
    #[arg(long, conflicts_with = "text")]
    pub input: Option<PathBuf>,
    /// One utterance per occurrence, read as consecutive turns of one dialogue.
    #[arg(long)]
    pub text: Vec<String>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub reps: usize,
    #[arg(long, default_value_t = 10)]
    pub warmup: usize,
    /// Settings timed interleaved, e.g. sha,sha_p or lrm_on,lrm_off or decoder_on,decoder_off.
    #[arg(long)]
    pub compare: Option<String>,
    /// f64 or f32.
    #[arg(long, default_value = "f64")]
    pub precision: String,
    /// tagger (parallel heads) or greedy (token-serial decoder).
    #[arg(long, default_value = "tagger")]
    pub mode: String,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    /// alpha, lambda, lrm_position or lrm_count.
    #[arg(long)]
    pub kind: String,
    /// Comma-separated grid; defaults to the standard grid for the kind.
    #[arg(long, value_delimiter = ',')]
    pub values: Vec<f64>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct ConvertArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.help_config {
        print!("{}", shalrt::config::HELP);
        return ExitCode::SUCCESS;
    }
    let Some(command) = cli.command else {
        eprintln!("error: no command given; see `shalrt --help`");
        return ExitCode::from(2);
    };
    let result = match command {
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Predict(a) => commands::predict(&a),
        Command::Bench(a) => commands::bench(&a),
        Command::Sweep(a) => commands::sweep(&a),
        Command::Convert(a) => commands::convert(&a),
        Command::Config(a) => commands::resolve_config(&a).map(|c| print!("{}", c.to_toml())),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
