use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cclis_cli::{export, parse_config, study, train, ExportWhat};

#[derive(Parser)]
#[command(name = "cclis", version, about = "Contrastive continual learning with importance-sampled replay")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every preset and seed, write metrics and a summary.
    Train {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Run the estimator and proposal studies.
    Study {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Export embeddings or rebuild the summary from finished runs.
    Export {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        what: ExportWhat,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let path = match &cli.command {
        Command::Train { config } | Command::Study { config } | Command::Export { config, .. } => config,
    };
    let cfg = match parse_config(path) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {}: {e}", path.display());
            return ExitCode::from(1);
        }
    };
    let out = std::env::var_os("CCLIS_OUT").map(PathBuf::from).unwrap_or_else(|| cfg.output_dir.clone());
    let result = match cli.command {
        Command::Train { .. } => train(&cfg, &out),
        Command::Study { .. } => study(&cfg, &out),
        Command::Export { what, .. } => export(&cfg, &out, what),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
