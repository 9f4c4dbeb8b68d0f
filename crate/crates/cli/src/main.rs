//! `vdforge`: the pipeline as a single command-line tool.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage errors.

mod args;
mod commands;
mod config;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

fn run(cli: Cli) -> anyhow::Result<()> {
    let cmd = &cli.command;
    if cmd.common().print_config {
        print!("{}", config::to_key_values(&cmd.resolved()));
        return Ok(());
    }
    match cmd {
        Command::Synth(a) => commands::synth(a),
        Command::Degrade(a) => commands::degrade_cmd(a),
        Command::Generate(a) => commands::generate(a),
        Command::Grade(a) => commands::grade_cmd(a),
        Command::Pairs(a) => commands::pairs_cmd(a),
        Command::Train(a) => commands::train(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Report(a) => commands::report(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let argv = match config::expand(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
