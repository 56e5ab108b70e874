use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ddpt_core::error::{Error, Result};
use ddpt_core::harness::{run_experiment, stages, ExperimentConfig};
use ddpt_core::metrics::{evaluate, read_texts};

#[derive(Parser)]
#[command(
    name = "ddpt",
    version,
    about = "Tune prompt context embeddings with a diffusion denoiser"
)]
struct Cli {
    /// TOML experiment config; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic train and held-out corpora.
    GenCorpus {
        #[arg(long)]
        seed: u64,
    },
    /// Pretrain and freeze the toy LM.
    PretrainLm {
        #[arg(long)]
        seed: u64,
    },
    /// Train the prompt denoiser against the frozen LM.
    Train {
        #[arg(long)]
        seed: u64,
    },
    /// Sample optimized contexts for the held-out set.
    Optimize {
        #[arg(long)]
        seed: u64,
    },
    /// Decode held-out outputs under manual and optimized contexts.
    Generate,
    /// Score predictions against references.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Also write per-sample scores as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Nearest vocabulary neighbours of the first optimized context.
    Interpret,
    /// Compare manual and optimized arms from stored artifacts.
    Report {
        #[arg(long)]
        seed: u64,
    },
    /// Every stage end to end.
    Run {
        #[arg(long)]
        seed: u64,
    },
}

fn with_seed(mut cfg: ExperimentConfig, seed: u64) -> ExperimentConfig {
    cfg.seed = Some(seed);
    cfg
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    let cfg = ExperimentConfig::load(cli.config.as_deref(), &cli.overrides)?;
    match cli.command {
        Command::GenCorpus { seed } => stages::gen_corpus(&cfg, seed),
        Command::PretrainLm { seed } => {
            print_json(&stages::pretrain_lm(&with_seed(cfg, seed), seed)?)
        }
        Command::Train { seed } => print_json(&stages::train(&cfg, seed)?),
        Command::Optimize { seed } => {
            let n = stages::optimize(&cfg, seed)?.len();
            println!("{n} optimized contexts");
            Ok(())
        }
        Command::Generate => {
            let n = stages::generate(&cfg)?.len();
            println!("{n} generations");
            Ok(())
        }
        Command::Evaluate {
            pred,
            reference,
            csv,
        } => {
            let cands = read_texts(&pred)?;
            let refs = read_texts(&reference)?;
            let report = evaluate(&cands, &refs, &cfg.metrics)?;
            if let Some(path) = csv {
                std::fs::write(&path, report.to_csv()).map_err(|e| Error::io(path, e))?;
            }
            println!("{}", report.to_json()?);
            Ok(())
        }
        Command::Interpret => {
            print!("{}", stages::interpret(&cfg)?.to_csv());
            Ok(())
        }
        Command::Report { seed } => {
            print!("{}", stages::report(&cfg, seed)?.to_csv());
            Ok(())
        }
        Command::Run { seed } => {
            print!("{}", run_experiment(&with_seed(cfg, seed))?.to_csv());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e.root() {
                Error::Config(_) => ExitCode::from(3),
                _ => ExitCode::from(1),
            }
        }
    }
}
