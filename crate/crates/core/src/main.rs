use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = aida_core::cli::Cli::parse();
    match aida_core::cli::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
