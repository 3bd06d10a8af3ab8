use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use privtarget::app::{self, RunConfig};
use privtarget::synth::GridSpec;

#[derive(Parser)]
#[command(name = "privtarget", version, about = "Targeting policies from private aggregate queries")]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding the configuration.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads, overriding the configuration.
    #[arg(long, global = true)]
    parallelism: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the synthetic experiment grid.
    Simulate {
        /// Use the complete factorial grid with every method.
        #[arg(long)]
        full_grid: bool,
    },
    /// Bootstrapped querying on an experimental dataset.
    Query {
        /// Dataset path, overriding the configuration.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Evaluate a saved policy on a dataset.
    Evaluate {
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Rebuild summaries and charts from saved result tables.
    Report {
        /// Results tables to aggregate.
        results: Vec<PathBuf>,
        /// Dominance table to render.
        #[arg(long)]
        dominance: Option<PathBuf>,
    },
    /// Write the synthetic uplift dataset.
    GenData {
        #[arg(long)]
        rows: Option<usize>,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = cli.out {
        config.out_dir = out;
    }
    if let Some(p) = cli.parallelism {
        config.parallelism = p;
    }
    let written = match cli.command {
        Command::Simulate { full_grid } => {
            if full_grid {
                config.simulate.grid = GridSpec::full();
            }
            app::cmd_simulate(&config)
        }
        Command::Query { dataset } => {
            if let Some(d) = dataset {
                config.query.dataset = d;
            }
            app::cmd_query(&config)
        }
        Command::Evaluate { policy, dataset } => {
            if let Some(p) = policy {
                config.evaluate.policy = p;
            }
            if let Some(d) = dataset {
                config.evaluate.dataset = d;
            }
            app::cmd_evaluate(&config)
        }
        Command::Report { results, dominance } => {
            if !results.is_empty() {
                config.report.results = results;
            }
            if dominance.is_some() {
                config.report.dominance = dominance;
            }
            app::cmd_report(&config)
        }
        Command::GenData { rows } => {
            if let Some(r) = rows {
                config.generate.replica.rows = r;
            }
            app::cmd_generate(&config)
        }
    }
    .context("command failed")?;
    for path in written {
        println!("{}", path.display());
    }
    Ok(())
}
