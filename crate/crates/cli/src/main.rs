//! Command-line driver for the disaggregated speculative-decoding stack.

use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Parser, Subcommand};

use specedge_core::config::ExperimentConfig;
use specedge_core::harness::{self, SUMMARY_HEADER};
use specedge_core::transport;

#[derive(Parser)]
#[command(
    name = "specedge",
    version,
    about = "Edge-assisted speculative decoding testbed"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the deterministic simulator over a config (sweep-aware) and print
    /// one summary row per run.
    Sim {
        /// Experiment config (TOML, strict keys).
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Directory for summary.csv and per-run trace CSVs.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve verification requests over TCP.
    Serve {
        #[arg(long)]
        config: PathBuf,
        /// Bind address; port 0 picks an ephemeral port.
        #[arg(long, default_value = "127.0.0.1:7700")]
        bind: String,
    },
    /// Run one edge session against a running server.
    Edge {
        #[arg(long)]
        config: PathBuf,
        /// Server address.
        #[arg(long)]
        connect: String,
        /// Session id (also selects the deterministic prompt).
        #[arg(long, default_value_t = 0)]
        session: u64,
        #[arg(long)]
        seed: Option<u64>,
        /// Directory for this session's rounds.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute a run's summary row from its emitted CSVs.
    Report {
        #[arg(long)]
        config: PathBuf,
        /// One run directory produced by `sim --out`.
        #[arg(long)]
        run_dir: PathBuf,
    },
}

fn load_config(path: &Path, seed: Option<u64>) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_path(path)
        .with_context(|| format!("loading config {}", path.display()))?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Sim { config, seed, out } => {
            let cfg = load_config(&config, seed)?;
            let rows = harness::run_experiment(&cfg, out.as_deref())?;
            println!("{SUMMARY_HEADER}");
            for row in rows {
                println!("{}", row.to_csv_line());
            }
            if let Some(dir) = out {
                eprintln!("wrote {}", dir.join("summary.csv").display());
            }
        }
        Command::Serve { config, bind } => {
            let cfg = load_config(&config, None)?;
            let server = transport::serve(&bind, &cfg)?;
            eprintln!("serving on {}", server.addr());
            // Runs until the process is killed.
            loop {
                std::thread::sleep(std::time::Duration::from_secs(3600));
            }
        }
        Command::Edge {
            config,
            connect,
            session,
            seed,
            out,
        } => {
            let cfg = load_config(&config, seed)?;
            let run = transport::edge_session(&connect, &cfg, session)?;
            let tokens = run
                .generated
                .iter()
                .map(|t| t.to_string())
                .collect::<Vec<_>>()
                .join(" ");
            println!("session {session}: {} tokens", run.generated.len());
            println!("{tokens}");
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                harness::write_rounds_csv(
                    &dir.join(format!("edge_{session}_rounds.csv")),
                    &run.rounds,
                )?;
            }
        }
        Command::Report { config, run_dir } => {
            let cfg = load_config(&config, None)?;
            let row = harness::report(&run_dir, &cfg)?;
            println!("{SUMMARY_HEADER}");
            println!("{}", row.to_csv_line());
        }
    }
    Ok(())
}
