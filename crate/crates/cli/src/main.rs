//! `spoofqa`: corpus generation, balanced subsets, zero-shot and fine-tuned
//! evaluation, LoRA fine-tuning, report rendering and bridge health checks.
//!
//! Exit codes: 0 ok, 2 config/usage, 3 I/O, 4 insufficient spoof pool,
//! 5 backend failure, 6 degraded run (or metrics undefined).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_INSUFFICIENT: u8 = 4;
pub const EXIT_BACKEND: u8 = 5;
pub const EXIT_DEGRADED: u8 = 6;

#[derive(Debug, Parser)]
#[command(name = "spoofqa", version, about = "Audio deepfake detection as audio question answering")]
#[command(args_override_self = true)]
pub struct Cli {
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Log filter for stderr diagnostics (error, warn, info, debug).
    #[arg(long, global = true, default_value = "info")]
    pub log_level: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a bonafide/spoof corpus of WAV files plus a manifest.
    GenCorpus(GenCorpusArgs),
    /// Build class-balanced, attack-stratified subsets for each split.
    BuildSubsets(BuildSubsetsArgs),
    /// Create a base model checkpoint (random init plus answer-format pretraining).
    InitModel(InitModelArgs),
    /// Evaluate a base model without task training.
    Zeroshot(EvalArgs),
    /// LoRA (or full) fine-tuning on a training manifest.
    Finetune(FinetuneArgs),
    /// Evaluate any checkpoint, adapter or remote backend on any manifest.
    Eval(EvalArgs),
    /// Render stored summaries as a table.
    Report(ReportArgs),
    /// Ping a bridge endpoint.
    BridgeHealth(BridgeHealthArgs),
}

#[derive(Debug, Args)]
pub struct GenCorpusArgs {
    #[arg(long)]
    pub bonafide: usize,
    #[arg(long)]
    pub spoof: usize,
    /// Comma-separated artifact families: glitch, monotone, robotic.
    #[arg(long, default_value = "glitch,monotone,robotic")]
    pub families: String,
    /// Seconds per utterance.
    #[arg(long, default_value_t = 1.0)]
    pub duration: f64,
    /// Split tag written into the manifest.
    #[arg(long, default_value = "train")]
    pub split: String,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BuildSubsetsArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Comma-separated splits to build.
    #[arg(long, default_value = "train,dev,eval")]
    pub splits: String,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InitModelArgs {
    /// Corpus used for answer-format pretraining (labels are not used).
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Format-pretraining steps; 0 writes the raw random initialization.
    #[arg(long, default_value_t = 300)]
    pub pretrain_steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub pretrain_lr: f64,
    #[arg(long, default_value_t = 64)]
    pub d_model: usize,
    #[arg(long, default_value_t = 2)]
    pub enc_layers: usize,
    #[arg(long, default_value_t = 2)]
    pub dec_layers: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 256)]
    pub d_ff: usize,
    #[arg(long, default_value_t = 4)]
    pub adapter_stride: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BackendArgs {
    /// Local model checkpoint.
    #[arg(long, conflicts_with = "endpoint")]
    pub model: Option<PathBuf>,
    /// Adapter-only checkpoint applied on top of --model.
    #[arg(long, requires = "model")]
    pub adapter: Option<PathBuf>,
    /// Remote bridge: host:port or stdio:<command>.
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Per-request timeout for remote backends, seconds.
    #[arg(long, default_value_t = 120.0)]
    pub timeout: f64,
    /// Display name for the backend in reports.
    #[arg(long)]
    pub model_name: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub backend: BackendArgs,
    #[arg(long)]
    pub manifest: PathBuf,
    /// p1, p2, p3 or multi.
    #[arg(long, default_value = "p1")]
    pub prompt: String,
    /// Score only the template's answer strings instead of free-form decoding.
    #[arg(long)]
    pub constrained: bool,
    /// Evaluate a seeded balanced draw of this many utterances instead of the whole manifest.
    #[arg(long)]
    pub sample: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    /// Base model checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub dev: Option<PathBuf>,
    /// p1, p3 or multi.
    #[arg(long, default_value = "multi")]
    pub prompt_mode: String,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long)]
    pub grad_clip: Option<f64>,
    #[arg(long, default_value_t = 8)]
    pub rank: usize,
    #[arg(long, default_value_t = 32.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.1)]
    pub lora_dropout: f64,
    /// Comma-separated projections: query, key, value, output.
    #[arg(long, default_value = "query,value")]
    pub targets: String,
    /// Also adapt the audio encoder's attention projections.
    #[arg(long)]
    pub lora_encoder: bool,
    /// Train all base weights instead of attaching adapters.
    #[arg(long)]
    pub full_finetune: bool,
    /// Use constrained decoding for per-epoch dev metrics.
    #[arg(long)]
    pub dev_constrained: bool,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Summary JSON files written by zeroshot/eval.
    #[arg(long = "input", required = true, num_args = 1..)]
    pub inputs: Vec<PathBuf>,
    /// text or csv.
    #[arg(long, default_value = "text")]
    pub format: String,
    /// Also write table.txt and table.csv here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BridgeHealthArgs {
    #[arg(long)]
    pub endpoint: String,
    #[arg(long, default_value_t = 10.0)]
    pub timeout: f64,
    /// Also classify this file; a refusal reports degraded.
    #[arg(long)]
    pub probe_wav: Option<PathBuf>,
}

fn main() -> ExitCode {
    let raw: Vec<String> = std::env::args().collect();
    let subcommands: Vec<String> = Cli::command()
        .get_subcommands()
        .map(|c| c.get_name().to_string())
        .collect();
    let args = match config::expand_config(raw, &subcommands) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            eprintln!("error: --jobs must be >= 1");
            return ExitCode::from(EXIT_CONFIG);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    }
    let mut flags: Vec<String> = args.iter().skip(1).cloned().collect();
    if let Some(i) = flags.iter().position(|a| subcommands.contains(a)) {
        flags.remove(i);
    }
    match commands::run(cli.command, &flags) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.msg);
            ExitCode::from(e.code)
        }
    }
}
