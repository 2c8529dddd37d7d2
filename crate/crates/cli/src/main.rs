use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vitprune::config::RunConfig;
use vitprune::Error;

mod commands;

#[derive(Debug, Parser)]
#[command(
    name = "vitprune",
    version,
    about = "Latency-aware structural pruning of vision transformers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model from scratch.
    Train(Common),
    /// Prune a trained checkpoint toward the target speedup.
    Prune(Common),
    /// Continue training a pruned checkpoint.
    Finetune(Common),
    /// Write an architecture from the block-dimension rule.
    Generate(Common),
    /// Build a latency lookup table.
    Profile(Common),
    /// Apply 2:4 sparsity to the block linears.
    Sparsify(Common),
    /// Summarize a pruning log and a checkpoint's attention.
    Analyze(Common),
    /// Top-1 accuracy of a checkpoint.
    Eval(Common),
}

#[derive(Debug, Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `run.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `run.threads`.
    #[arg(long)]
    threads: Option<usize>,
    /// Overrides `run.out`.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Command {
    fn parts(&self) -> (&'static str, &Common) {
        match self {
            Command::Train(c) => ("train", c),
            Command::Prune(c) => ("prune", c),
            Command::Finetune(c) => ("finetune", c),
            Command::Generate(c) => ("generate", c),
            Command::Profile(c) => ("profile", c),
            Command::Sparsify(c) => ("sparsify", c),
            Command::Analyze(c) => ("analyze", c),
            Command::Eval(c) => ("eval", c),
        }
    }
}

/// Resolved configuration plus the run directory it writes into.
pub struct Run {
    pub command: &'static str,
    pub cfg: RunConfig,
    pub hash: String,
}

impl Run {
    pub fn out(&self) -> &Path {
        &self.cfg.run.out
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.cfg.run.out.join(name)
    }
}

fn setup(command: &'static str, args: &Common) -> vitprune::Result<Run> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(s) = args.seed {
        cfg.run.seed = s;
    }
    if let Some(t) = args.threads {
        cfg.run.threads = Some(t);
    }
    if let Some(o) = &args.out {
        cfg.run.out = o.clone();
    }
    cfg.validate(command)?;
    cfg.materialize()?;
    if let Some(t) = cfg.run.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| Error::config("run.threads", e.to_string()))?;
    }
    std::fs::create_dir_all(&cfg.run.out)?;
    let hash = cfg.hash()?;
    vitprune::checkpoint::write_atomic(
        &cfg.run.out.join("config.toml"),
        cfg.to_toml()?.as_bytes(),
    )?;
    let meta = serde_json::json!({
        "command": command,
        "seed": cfg.run.seed,
        "threads": rayon::current_num_threads(),
        "version": env!("CARGO_PKG_VERSION"),
        "config_hash": hash,
    });
    vitprune::checkpoint::write_atomic(
        &cfg.run.out.join("run.json"),
        serde_json::to_string_pretty(&meta)?.as_bytes(),
    )?;
    Ok(Run { command, cfg, hash })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (command, args) = cli.command.parts();
    let result = setup(command, args).and_then(|run| commands::dispatch(&run));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
