pub mod api;
pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use solobot_core::model::OptimizerKind;
use thiserror::Error;

pub use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, config, or input files.
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Runtime(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "solobot", version, about = "Train, evaluate, serve and teach a single-model task bot")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub flags: Flags,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus (--out) and its database (--db).
    Synth,
    /// Train a model from scratch on one or more corpora.
    Pretrain,
    /// Continue training a checkpoint on a (small) target corpus.
    Finetune,
    /// Score a checkpoint on a test corpus.
    Eval,
    /// Talk to a checkpoint on the terminal.
    Chat,
    /// Run the teaching HTTP service.
    Serve,
    /// Run the teaching service and point a browser at the console.
    Teach {
        #[arg(long)]
        open_ui: bool,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Pretrain => "pretrain",
            Command::Finetune => "finetune",
            Command::Eval => "eval",
            Command::Chat => "chat",
            Command::Serve => "serve",
            Command::Teach { .. } => "teach",
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    /// JSON run config; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub corpus: Vec<PathBuf>,
    #[arg(long, global = true)]
    pub valid_corpus: Vec<PathBuf>,
    #[arg(long, global = true)]
    pub heldout: Option<PathBuf>,
    #[arg(long, global = true)]
    pub db: Vec<PathBuf>,
    #[arg(long, global = true)]
    pub vocab: Option<PathBuf>,
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Output path (checkpoint, or corpus for synth).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub report: Option<PathBuf>,
    /// Write serialized sequences in plain text here.
    #[arg(long, global = true)]
    pub dump_text: Option<PathBuf>,
    #[arg(long, global = true)]
    pub transcript: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub top_p: Option<f64>,
    #[arg(long, global = true)]
    pub temperature: Option<f64>,
    #[arg(long, global = true)]
    pub greedy: bool,
    #[arg(long, global = true)]
    pub max_len: Option<usize>,
    #[arg(long, global = true)]
    pub vocab_size: Option<usize>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub max_steps: Option<usize>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    #[arg(long, global = true, value_parser = parse_optimizer)]
    pub optimizer: Option<OptimizerKind>,
    #[arg(long, global = true)]
    pub d_model: Option<usize>,
    #[arg(long, global = true)]
    pub layers: Option<usize>,
    #[arg(long, global = true)]
    pub heads: Option<usize>,
    #[arg(long, global = true)]
    pub dropout: Option<f64>,
    #[arg(long, global = true)]
    pub patience: Option<usize>,
    /// Probability of replacing a training sequence by a negative.
    #[arg(long, global = true)]
    pub neg_prob: Option<f64>,
    #[arg(long, global = true)]
    pub domain: Option<String>,
    #[arg(long, global = true)]
    pub dialogs: Option<usize>,
    #[arg(long, global = true)]
    pub entities: Option<usize>,
    #[arg(long, global = true)]
    pub host: Option<String>,
    #[arg(long, global = true)]
    pub port: Option<u16>,
    /// Base examples mixed into teach jobs per corrected example.
    #[arg(long, global = true)]
    pub mix_ratio: Option<f64>,
    #[arg(long, global = true)]
    pub teach_steps: Option<usize>,
    #[arg(long, global = true)]
    pub ui_dir: Option<PathBuf>,
    /// Print the resolved config and exit.
    #[arg(long, global = true)]
    pub dry_run: bool,
}

fn parse_optimizer(s: &str) -> Result<OptimizerKind, String> {
    match s {
        "sgd" => Ok(OptimizerKind::Sgd),
        "adamw" | "adam" => Ok(OptimizerKind::Adamw),
        other => Err(format!("unknown optimizer {other:?}; use sgd or adamw")),
    }
}

/// Defaults, then the config file, then flags.
pub fn resolve(command: &Command, flags: &Flags) -> Result<RunConfig, CliError> {
    let mut cfg = match &flags.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    cfg.command = command.name().to_string();
    let f = flags.clone();
    if !f.corpus.is_empty() {
        cfg.corpus = f.corpus;
    }
    if !f.valid_corpus.is_empty() {
        cfg.valid_corpus = f.valid_corpus;
    }
    if !f.db.is_empty() {
        cfg.db = f.db;
    }
    macro_rules! set {
        ($($flag:ident => $($field:ident).+),* $(,)?) => {
            $(if let Some(v) = f.$flag { cfg.$($field).+ = v.into(); })*
        };
    }
    set!(
        heldout => heldout,
        vocab => vocab,
        checkpoint => checkpoint,
        out => out,
        report => report,
        dump_text => dump_text,
        transcript => transcript,
        top_p => decode.top_p,
        temperature => decode.temperature,
        max_len => max_len,
        vocab_size => vocab_size,
        epochs => train.epochs,
        max_steps => train.max_steps,
        batch_size => train.batch_size,
        lr => train.optim.lr,
        optimizer => train.optim.kind,
        d_model => model.d_model,
        layers => model.layers,
        heads => model.heads,
        dropout => model.dropout,
        patience => train.patience,
        neg_prob => train.contrast_neg_prob,
        domain => synth.domain,
        dialogs => synth.dialogs,
        entities => synth.entities,
        host => host,
        port => port,
        mix_ratio => teach.mix_ratio,
        teach_steps => teach.steps,
        ui_dir => ui_dir,
    );
    if let Some(d) = f.d_model {
        cfg.model.d_ff = 4 * d;
    }
    if f.greedy {
        cfg.decode.greedy = true;
    }
    if let Some(seed) = f.seed {
        cfg.set_seed(seed);
    }
    cfg.decode
        .validate()
        .map_err(|e| CliError::Invalid(e.to_string()))?;
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = resolve(&cli.command, &cli.flags)?;
    if cli.flags.dry_run {
        println!("{}", cfg.to_json());
        return Ok(());
    }
    commands::run(&cli.command, cfg)
}
