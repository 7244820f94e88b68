use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "mmtp", version, about = "Multi-modal attention trajectory predictor")]
struct Cli {
    /// Seed for generation and training; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Suppress progress output.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenes.
    GenData {
        /// straight, left_turn, right_turn, fork, intersection, or mixed.
        #[arg(long, default_value = "mixed")]
        preset: String,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoints and metrics.csv.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Report minADE, minFDE, brier-minFDE and miss rate.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write one prediction JSON per scene.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render per-mode attention over the map as SVG.
    Viz {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.01)]
        min_score: f64,
    },
}

fn run(cli: Cli) -> Result<()> {
    let say = |line: &str| {
        if !cli.quiet {
            println!("{line}");
        }
    };
    match cli.command {
        Command::GenData { preset, count, out } => {
            for p in mmtp_cli::gen_data(&preset, count, cli.seed.unwrap_or(0), &out)? {
                say(&p.display().to_string());
            }
        }
        Command::Train { config, data, out } => {
            let cfg = mmtp_cli::run_config(config.as_deref(), data.as_deref(), out.as_deref(), cli.seed)?;
            let outcome = mmtp_cli::train_cmd(&cfg, |line| say(&line))?;
            if let Some(last) = outcome.checkpoints.last() {
                say(&format!("saved {}", last.display()));
            }
        }
        Command::Eval { ckpt, data, out } => {
            let report = mmtp_cli::eval(&ckpt, &data)?;
            print!("{}", report.to_table());
            if let Some(path) = out {
                std::fs::write(&path, report.to_json()?).with_context(|| format!("writing {}", path.display()))?;
            }
        }
        Command::Predict { ckpt, data, out } => {
            for p in mmtp_cli::predict(&ckpt, &data, &out)? {
                say(&p.display().to_string());
            }
        }
        Command::Viz { ckpt, scene, out, min_score } => {
            let svg = mmtp_cli::viz(&ckpt, &scene, min_score)?;
            std::fs::write(&out, svg).with_context(|| format!("writing {}", out.display()))?;
            say(&out.display().to_string());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
