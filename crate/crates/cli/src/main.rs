//! `sfns`: one binary for every pipeline stage. Artifacts move between
//! stages as files; every command prints or writes a JSON report holding
//! its resolved configuration and seed.

mod args;
mod commands;
mod report;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use args::Cli;
use report::CliError;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("SFNS_LOG", "warn")).init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

impl CliError {
    /// 2 for filesystem failures, 1 for everything the caller can fix by
    /// changing arguments or input data.
    fn exit_code(&self) -> u8 {
        if self.is_io() {
            2
        } else {
            1
        }
    }
}
