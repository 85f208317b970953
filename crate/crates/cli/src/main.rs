//! `cqrank`: prepare data, fetch embeddings, train, rank, evaluate and analyze.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cqrank_core::eval::EmptyGold;
use cqrank_core::ranker::ModelVariant;
use cqrank_core::{ErrorKind, Result};

use crate::config::{ExperimentConfig, RegimeChoice};

#[derive(Parser)]
#[command(name = "cqrank", version, about = "Rank clarification questions with a classifier over sentence embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args, Default)]
struct Overrides {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    variant: Option<ModelVariant>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    epochs: Option<u64>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    #[arg(long, global = true)]
    dropout: Option<f64>,
    /// Embedding store file.
    #[arg(long, global = true)]
    store: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    regime: Option<RegimeChoice>,
    #[arg(long, global = true)]
    empty_gold: Option<EmptyGold>,
}

#[derive(Subcommand)]
enum Command {
    /// Validate every configured split and write their manifests.
    Prepare,
    /// Embed all post, question and answer texts through the embedding service.
    EmbedFetch {
        #[arg(long)]
        endpoint: Option<String>,
    },
    /// Train the classifier, writing one checkpoint per epoch and a log.
    Train {
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Rank every test candidate set.
    Rank {
        /// Defaults to the final-epoch checkpoint under the output dir.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Precision@1..5 of the rankings against the annotations.
    Eval {
        #[arg(long)]
        rankings: Option<PathBuf>,
    },
    /// Rank-1 correctness bucketed by post length.
    Analyze {
        #[arg(long)]
        rankings: Option<PathBuf>,
    },
    /// Convert the original tab-separated release into JSONL.
    Convert {
        #[arg(long)]
        post_data: PathBuf,
        #[arg(long)]
        qa_data: PathBuf,
        /// File of post ids (one per line) selecting and ordering the output.
        #[arg(long)]
        ids: Option<PathBuf>,
        #[arg(long)]
        triples_out: PathBuf,
        #[arg(long)]
        sets_out: PathBuf,
    },
}

impl Overrides {
    fn apply(self, cfg: &mut ExperimentConfig) {
        let t = &mut cfg.train;
        if let Some(v) = self.variant {
            t.variant = v;
        }
        if let Some(v) = self.seed {
            t.seed = v;
        }
        if let Some(v) = self.epochs {
            t.epochs = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.lr {
            t.learning_rate = v;
        }
        if let Some(v) = self.dropout {
            t.dropout_rate = v;
        }
        if self.store.is_some() {
            cfg.paths.store = self.store;
        }
        if let Some(v) = self.out {
            cfg.paths.out = v;
        }
        if let Some(v) = self.regime {
            cfg.eval.regime = v;
        }
        if let Some(v) = self.empty_gold {
            cfg.eval.empty_gold = v;
        }
    }
}

/// Worker cap from `CQRANK_THREADS`; 0 means the pool default.
fn worker_count() -> Result<usize> {
    match std::env::var("CQRANK_THREADS") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| cqrank_core::Error::Config(format!("CQRANK_THREADS={v:?} is not a thread count"))),
        Err(_) => Ok(0),
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.overrides.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cli.overrides.apply(&mut cfg);
    cfg.train.workers = worker_count()?;
    if cfg.train.workers > 0 {
        // only fails if a pool already exists, which cannot happen this early
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.train.workers).build_global();
    }
    cfg.validate()?;
    eprintln!("config digest: {}", cfg.digest());

    match cli.command {
        Command::Prepare => commands::prepare(&cfg),
        Command::EmbedFetch { endpoint } => commands::embed_fetch(&cfg, endpoint),
        Command::Train { resume } => commands::train(&cfg, resume),
        Command::Rank { checkpoint } => commands::rank(&cfg, checkpoint),
        Command::Eval { rankings } => commands::eval(&cfg, rankings),
        Command::Analyze { rankings } => commands::analyze(&cfg, rankings),
        Command::Convert {
            post_data,
            qa_data,
            ids,
            triples_out,
            sets_out,
        } => commands::convert(&post_data, &qa_data, ids.as_deref(), &triples_out, &sets_out),
    }
}

fn exit_status(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numeric => 4,
        ErrorKind::Io => 5,
        ErrorKind::Remote => 6,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_status(e.kind()))
        }
    }
}
