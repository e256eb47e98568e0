use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ticketforge_cli::commands::{cmd_build_vocab, cmd_divergence, cmd_obtain, cmd_report, cmd_transfer};
use ticketforge_cli::{CliError, Context, ExperimentConfig};

/// Lottery-ticket pruning and cross-domain transfer experiments.
#[derive(Debug, Parser)]
#[command(name = "ticketforge", version)]
struct Cli {
    /// experiment configuration (TOML); built-in desk-scale defaults otherwise
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// published hyperparameters (8K vocabulary, full model, 20 rounds)
    #[arg(long, global = true)]
    paper: bool,

    /// generate toy domains instead of reading review files
    #[arg(long, global = true)]
    synthetic: bool,

    /// comma-separated seeds, overriding the configuration
    #[arg(long, global = true, value_delimiter = ',')]
    seed_list: Option<Vec<u64>>,

    /// output directory
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,

    /// redo work whose outputs already exist
    #[arg(long, global = true)]
    force: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the joint subword vocabulary.
    BuildVocab,
    /// Write the pairwise divergence matrix of the domains.
    Divergence,
    /// Run the lottery in every domain and store tickets.
    Obtain,
    /// Re-train stored tickets in the other domains.
    Transfer,
    /// Summarize records across seeds.
    Report {
        /// output directories of earlier runs; defaults to --out
        dirs: Vec<PathBuf>,
    },
}

fn resolve(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if cli.paper {
        cfg.apply_paper_preset();
    }
    if cli.synthetic || (cli.config.is_none() && cfg.domains.is_empty()) {
        cfg.use_synthetic();
    }
    if let Some(seeds) = &cli.seed_list {
        cfg.seeds = seeds.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = resolve(&cli)?;
    if let Command::Report { dirs } = &cli.command {
        let dirs = if dirs.is_empty() { vec![cli.out.clone()] } else { dirs.clone() };
        cmd_report(&dirs, &cli.out, &cfg.phase)?;
        return Ok(());
    }
    let ctx = Context::new(cfg, cli.out.clone(), cli.force)?;
    match cli.command {
        Command::BuildVocab => {
            cmd_build_vocab(&ctx)?;
        }
        Command::Divergence => {
            cmd_divergence(&ctx)?;
        }
        Command::Obtain => {
            cmd_obtain(&ctx)?;
        }
        Command::Transfer => {
            cmd_transfer(&ctx)?;
        }
        Command::Report { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
