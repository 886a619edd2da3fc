mod args;
mod commands;
mod settings;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

/// Exit status classes.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags or inputs the user must fix.
    Usage(String),
    /// A validation or invariant check failed.
    Invalid(String),
}

impl From<paec::Error> for Failure {
    fn from(e: paec::Error) -> Self {
        match e {
            paec::Error::Selection(_) | paec::Error::File { .. } => Failure::Usage(e.to_string()),
            other => Failure::Invalid(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = settings::Settings::load(&cli.global).and_then(|s| match cli.command {
        Command::Simulate(a) => commands::simulate(&s, a),
        Command::Train(a) => commands::train(&s, a),
        Command::Infer(a) => commands::infer(&s, a),
        Command::Evaluate(a) => commands::evaluate(&s, a),
        Command::Selftest(a) => commands::selftest(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
