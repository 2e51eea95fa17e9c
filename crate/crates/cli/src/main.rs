//! `tgdpo-lab`: generate data, train, verify the theory checks, compare
//! methods and export token rewards.

mod commands;
mod config;

use std::process::ExitCode;

use clap::Command;
use tgdpo_lab::LabError;

/// A failed command and its exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags, config or inputs: exit 2.
    Usage(String),
    /// Training or other runtime failure: exit 3.
    Runtime(String),
    /// A verification check failed: exit 4.
    Verify(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Self::Usage(_) => 2,
            Self::Runtime(_) => 3,
            Self::Verify(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Self::Usage(m) | Self::Runtime(m) | Self::Verify(m) => m,
        }
    }
}

impl From<LabError> for Failure {
    fn from(e: LabError) -> Self {
        match e {
            LabError::Validation(_) | LabError::Config(_) | LabError::Frozen(_) | LabError::Json(_) => {
                Self::Usage(e.to_string())
            }
            _ => Self::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::Runtime(e.to_string())
    }
}

fn cli() -> Command {
    Command::new("tgdpo-lab")
        .about("Token-level reward-guided preference optimization on tabular policies")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommands(commands::COMMANDS.iter().map(|c| config::command(Command::new(c.name).about(c.about), c.keys)))
}

fn main() -> ExitCode {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    let cmd = commands::COMMANDS.iter().find(|c| c.name == name).expect("registered subcommand");
    let result = config::Settings::resolve(cmd.keys, sub).and_then(|s| (cmd.run)(&s));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
