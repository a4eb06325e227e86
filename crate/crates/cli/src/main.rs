use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = skelkit_cli::Cli::parse();
    match skelkit_cli::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(skelkit_cli::exit_code(&e))
        }
    }
}
