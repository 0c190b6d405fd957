use clap::Parser;
use std::process::ExitCode;

use stratigraph::cli::{run, Cli};

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error[{}]: {}", err.category(), err);
            ExitCode::FAILURE
        }
    }
}
