//! `prunas`: profile class easiness, search, fine-tune, count FLOPs and run
//! ablations from the command line.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 bad input or config.

mod commands;
mod inputs;
mod run;

use std::fmt;
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};
use prunas_core::Error;

/// A failure with the exit code it maps to.
#[derive(Debug)]
pub struct Fail {
    pub code: u8,
    pub msg: String,
}

impl Fail {
    pub fn input(msg: impl Into<String>) -> Self {
        Fail {
            code: 2,
            msg: msg.into(),
        }
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        Fail {
            code: 1,
            msg: msg.into(),
        }
    }
}

impl fmt::Display for Fail {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        match e {
            Error::Diverged { .. } | Error::Tensor(_) | Error::Io(_) => Fail::runtime(e.to_string()),
            _ => Fail::input(e.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "prunas", version, about = "Class-easiness guided architecture search")]
struct Cli {
    /// More log output (repeatable).
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,
    /// Only errors.
    #[arg(short, long, global = true, conflicts_with = "verbose")]
    quiet: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Rank classes by the entropy of reference-network predictions.
    Profile(commands::ProfileArgs),
    /// Run the supernet search and derive an architecture.
    Search(commands::SearchArgs),
    /// Train a derived architecture from scratch and report top-1.
    Finetune(commands::FinetuneArgs),
    /// Print the FLOPs table of a search space or a derived architecture.
    Flops(commands::FlopsArgs),
    /// Compare class-schedule orderings.
    Ablate(commands::AblateArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => "error",
        (false, 0) => "warn",
        (false, 1) => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    let out = match cli.cmd {
        Cmd::Profile(a) => commands::profile(a),
        Cmd::Search(a) => commands::search(a),
        Cmd::Finetune(a) => commands::finetune(a),
        Cmd::Flops(a) => commands::flops(a),
        Cmd::Ablate(a) => commands::ablate(a),
    };
    match out {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
