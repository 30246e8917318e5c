use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use specgeo::config::ExperimentConfig;
use specgeo::pipeline::{cmd_generate, cmd_geometry, cmd_stability, cmd_training};
use specgeo::Result;

#[derive(Parser)]
#[command(name = "specgeo", version, about = "Spectral sparsification stability experiments for polynomial-filter GNNs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write graph, feature, label and mask files
    Generate(Common),
    /// Sparsifier sweep with filter, representation and Gram certificates
    Stability(Common),
    /// Matched dense/sparse gradient-descent trajectories
    Training(Common),
    /// Embedding geometry sweep on a dense-trained model
    Geometry(Common),
}

#[derive(Args)]
struct Common {
    /// Key-value config file; defaults apply to every key it omits
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output_dir`)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed (overrides `master_seed`)
    #[arg(long)]
    seed: Option<u64>,
    /// Exit with status 4 if any bound certificate fails
    #[arg(long)]
    strict: bool,
}

impl Common {
    fn resolve(&self) -> Result<(ExperimentConfig, PathBuf)> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.master_seed = s;
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        cfg.validate()?;
        let out = cfg.output_dir.clone();
        Ok((cfg, out))
    }
}

fn run(cli: Cli) -> Result<Vec<PathBuf>> {
    match cli.command {
        Command::Generate(c) => {
            let (cfg, out) = c.resolve()?;
            cmd_generate(&cfg, &out)
        }
        Command::Stability(c) => {
            let (cfg, out) = c.resolve()?;
            cmd_stability(&cfg, &out, c.strict)
        }
        Command::Training(c) => {
            let (cfg, out) = c.resolve()?;
            cmd_training(&cfg, &out)
        }
        Command::Geometry(c) => {
            let (cfg, out) = c.resolve()?;
            cmd_geometry(&cfg, &out, c.strict)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
