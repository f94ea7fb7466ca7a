//! `glass`: command-line driver for forging, training and evaluation.
//!
//! Exit codes: 0 success, 1 domain error (or a failed gradient check),
//! 2 usage error.

mod args;
mod commands;
mod manifest;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};
use commands::UsageError;

fn run(cli: &Cli) -> anyhow::Result<u8> {
    match &cli.command {
        Command::Forge(a) => commands::forge_cmd(a),
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train_cmd(a, false),
        Command::PretrainText(a) => commands::train_cmd(a, true),
        Command::Eval(a) => commands::eval_cmd(a),
        Command::Compare(a) => commands::compare(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Inspect(a) => commands::inspect(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(&cli.log_level)).init();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(1)
        }
    }
}

/// The error chain joined by `: `, skipping causes a message already quotes.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}
