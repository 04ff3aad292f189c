//! `multires` — experiment harness for multi-resolution semi-supervised
//! classification.
//!
//! Subcommands: `generate` (synthetic CSV datasets), `train` (one run with
//! artifacts), `compare` (method table), `sweep-labels` (accuracy vs label
//! budget), `model-complexity` ({logreg, mlp1} × {onlyfine,
//! multires-attention}), and `export-attention` (per-group weight CSV).
//! Every command is deterministic under its seed inputs.
//!
//! Exit codes: 0 success, 1 data or runtime error, 2 usage error.

mod cli;
mod commands;
mod fileconf;
mod tables;

use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let parsed = cli::Cli::parse();
    match commands::run(parsed) {
        Ok(()) => ExitCode::SUCCESS,
        Err(commands::CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(commands::CliError::Runtime(err)) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}
