mod commands;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Dual-route prompted detector: data, training, prompts, evaluation, plots.
#[derive(Parser, Debug)]
#[command(name = "petduet", version, about)]
struct Cli {
    /// Worker threads (1 forces single-threaded, reproducible execution).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic corpus to disk.
    GenData(GenDataArgs),
    /// Write a run config preset to a file for editing.
    InitConfig(InitConfigArgs),
    /// Text-route pre-training.
    Pretrain(TrainArgs),
    /// Cyclical visual/text training.
    Train(TrainArgs),
    /// Average per-category prompts over training images.
    ExtractPrompts(ExtractArgs),
    /// Score a checkpoint under one protocol.
    Eval(EvalArgs),
    /// Loss curves and ablation bar charts as SVG.
    Plot(PlotArgs),
    /// Train and score all four strategy variants.
    Ablate(AblateArgs),
    /// Full chain: data, pre-training, training, prompts, evaluation, plots.
    Reproduce(ReproduceArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Corpus {
    /// Three shapes in two close colors per dataset, look-alikes never share an image.
    Pairs,
    /// Six distinct shape/color categories per dataset.
    Distinct,
    /// 24 categories per dataset, including near-duplicate colors.
    Wide,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// JSON list of scene specs; overrides --corpus.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "pairs")]
    pub corpus: Corpus,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Images per dataset.
    #[arg(long, default_value_t = 1000)]
    pub images: usize,
    #[arg(long, default_value_t = 64)]
    pub image_size: usize,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct InitConfigArgs {
    #[arg(long, default_value = "desk-scale")]
    pub preset: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq, Eq)]
pub enum Freeze {
    /// `paper` with --pretrained, `none` otherwise.
    Auto,
    None,
    Paper,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Run config JSON (`{"model": ..., "train": ...}`).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Preset used when --config is absent.
    #[arg(long, default_value = "desk-scale")]
    pub preset: String,
    /// Corpus root holding one directory per dataset; defaults to
    /// `$PETDUET_CACHE/data`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Start from these weights (the inherited arm).
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
    /// Continue an interrupted run from its checkpoint.
    #[arg(long, conflicts_with = "pretrained")]
    pub resume: Option<PathBuf>,
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<petduet::training::Variant>,
    #[arg(long, value_enum, default_value = "auto")]
    pub freeze: Freeze,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Step budget; overrides the epoch count.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct ExtractArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// One dataset directory; its training split is used.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub per_category: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// One dataset directory; its held-out split is scored.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_parser = parse_protocol)]
    pub protocol: petduet::evalproto::Protocol,
    /// Prompt file from extract-prompts; required for visual-g.
    #[arg(long, required_if_eq("protocol", "visual-g"))]
    pub prompts: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory receiving the report JSON and `metrics.csv`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub run_id: Option<String>,
    /// Leave wall time out of the metrics row.
    #[arg(long)]
    pub deterministic: bool,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    /// `ledger.jsonl` from a training run.
    #[arg(long)]
    pub ledger: Option<PathBuf>,
    /// `ablation.csv` from the ablate command.
    #[arg(long)]
    pub ablation: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "desk-scale")]
    pub preset: String,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct ReproduceArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1000)]
    pub images: usize,
    #[arg(long, value_enum, default_value = "pairs")]
    pub corpus: Corpus,
    #[arg(long, default_value_t = 1000)]
    pub pretrain_steps: usize,
    /// Visual-phase budget; the preset's epochs when absent.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub force: bool,
}

fn parse_variant(s: &str) -> Result<petduet::training::Variant, String> {
    s.parse().map_err(|e: petduet::Error| e.to_string())
}

fn parse_protocol(s: &str) -> Result<petduet::evalproto::Protocol, String> {
    s.parse().map_err(|e: petduet::Error| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        petduet::par::set_threads(n);
    }
    let res = match cli.cmd {
        Command::GenData(a) => commands::gen_data(&a),
        Command::InitConfig(a) => commands::init_config(&a),
        Command::Pretrain(a) => commands::train(&a, true),
        Command::Train(a) => commands::train(&a, false),
        Command::ExtractPrompts(a) => commands::extract_prompts(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Plot(a) => commands::plot(&a),
        Command::Ablate(a) => commands::ablate(&a),
        Command::Reproduce(a) => commands::reproduce(&a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let usage = e.downcast_ref::<commands::UsageError>().is_some();
            eprintln!("error: {e:#}");
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}
