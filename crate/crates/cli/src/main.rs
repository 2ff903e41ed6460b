mod args;
mod commands;
mod overlay;

use std::process::ExitCode;

use clap::Parser;
use serde::Serialize;

use args::{Cli, Command};
use tagembed::Error;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Lib(Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Lib(Error::Numerical(_)) => 3,
            CliError::Lib(Error::UnknownQuery(_) | Error::DegenerateQuery) => 4,
            CliError::Lib(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Lib(e) => e.fmt(f),
        }
    }
}

fn resolved<T: Serialize>(name: &str, args: &T) -> String {
    let body = overlay::render(&serde_json::to_value(args).expect("arguments serialize"));
    format!("# tagembed {} {name}\n{body}", env!("CARGO_PKG_VERSION"))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();

    let raw = match overlay::apply(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let cli = Cli::parse_from(raw);
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        tagembed::par::set_max_threads(n);
    }

    let name = cli.command.name();
    let config = match &cli.command {
        Command::GenSynthetic(a) => resolved(name, a),
        Command::Train(a) => resolved(name, a),
        Command::Tag(a) => resolved(name, a),
        Command::Retrieve(a) => resolved(name, a),
        Command::Evaluate(a) => resolved(name, a),
        Command::SnapOov(a) => resolved(name, a),
        Command::Bench(a) => resolved(name, a),
    };
    if cli.print_config {
        print!("{config}");
        return ExitCode::SUCCESS;
    }
    eprint!("{config}");

    let result = match &cli.command {
        Command::GenSynthetic(a) => commands::gen_synthetic(a),
        Command::Train(a) => commands::train(a, &config),
        Command::Tag(a) => commands::tag(a),
        Command::Retrieve(a) => commands::retrieve(a),
        Command::Evaluate(a) => commands::evaluate_cmd(a),
        Command::SnapOov(a) => commands::snap(a),
        Command::Bench(a) => commands::bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
