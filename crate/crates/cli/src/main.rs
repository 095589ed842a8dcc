use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = hmseg_cli::cli::Cli::parse();
    match hmseg_cli::cli::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
