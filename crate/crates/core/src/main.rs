use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use svtriage::config::ExperimentConfig;
use svtriage::pipeline::{run, Command, COMMANDS};

/// Speaker verification experiments: gen-data, train, score, fuse-sweep,
/// triage-sweep, triage-apply, eval, xeval, report.
#[derive(Parser)]
#[command(name = "svtriage", version)]
struct Cli {
    /// Pipeline step to run.
    #[arg(value_parser = command_names())]
    command: String,

    /// Experiment config file.
    #[arg(long)]
    config: PathBuf,

    /// Overrides `experiment.seed` and the seeds derived from it.
    #[arg(long)]
    seed: Option<u64>,
}

fn command_names() -> clap::builder::PossibleValuesParser {
    clap::builder::PossibleValuesParser::new(COMMANDS.map(|(name, _)| name))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = (|| {
        let command: Command = cli.command.parse()?;
        let mut cfg = ExperimentConfig::load(&cli.config)?;
        if let Some(seed) = cli.seed {
            cfg = cfg.with_seed(seed);
        }
        run(command, &cfg)
    })();
    match result {
        Ok(summary) => {
            println!("{}: {}", cli.command, summary.trim_end());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("svtriage {}: {e}", cli.command);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
