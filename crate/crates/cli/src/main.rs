use std::process::ExitCode;

use blockdiff_cli::{commands, Cli, RunConfig};
use clap::Parser;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let name = cli.command.name();
    let result = RunConfig::load(cli.config.as_deref(), &cli.overrides, cli.seed).and_then(|cfg| commands::run(&cli.command, &cfg, &cli.out));
    match result {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", serde_json::to_string(&e.record(name)).expect("record serializes"));
            ExitCode::FAILURE
        }
    }
}
