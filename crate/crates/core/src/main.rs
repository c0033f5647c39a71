use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = bism::cli::Cli::parse();
    match bism::cli::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(bism::cli::exit_code(&e))
        }
    }
}
