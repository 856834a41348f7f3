use std::process::ExitCode;

use clap::Parser;
use cmnet::cli::{exit_code, run, Cli, EXIT_CONFIG};

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(EXIT_CONFIG as u8);
        }
    };
    match run(&cli, &args) {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("cmnet {}: {e}", cli.command.name());
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
