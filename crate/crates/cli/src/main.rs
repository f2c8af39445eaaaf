use std::process::ExitCode;

use clap::Parser;
use mfimpute_cli::args::Cli;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = cli.command.into_config().and_then(mfimpute_cli::execute);
    match result {
        Ok(manifest) => {
            for w in &manifest.warnings {
                eprintln!("warning: {w}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
