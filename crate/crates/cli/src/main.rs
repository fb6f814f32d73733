use std::process::ExitCode;

use clap::Parser;
use snowball_cli::commands::{dispatch, Cli};
use snowball_cli::exit_status;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = dispatch(cli);
    if let Err(e) = &result {
        eprintln!("error: {e:#}");
    }
    ExitCode::from(exit_status(&result))
}
