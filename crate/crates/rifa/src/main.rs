use clap::Parser;
use std::process::ExitCode;

fn main() -> ExitCode {
    let cli = rifa::cli::Cli::parse();
    match rifa::cli::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
