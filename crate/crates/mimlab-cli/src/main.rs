//! Experiment runner for the latent-variable-model lab.
//!
//! Subcommands: generate | train | eval | sweep | verify. Each takes an
//! optional TOML config path plus `key=value` overrides; see the README
//! for the schema. Exit codes: 0 success, 1 validation error, 2 runtime
//! abort, 3 partial sweep failure.

mod commands;
mod config;
mod util;

use clap::Parser;
use commands::{dispatch, CmdError, CmdOutcome};
use config::ExperimentConfig;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "mimlab",
    about = "Train, evaluate and verify encoder/decoder latent-variable models at desk scale",
    arg_required_else_help = true
)]
struct Cli {
    /// generate | train | eval | sweep | verify
    command: String,
    /// Optional config path followed by key=value overrides, in any order.
    #[arg(trailing_var_arg = true)]
    args: Vec<String>,
}

fn main() {
    let cli = Cli::parse();
    std::process::exit(run(&cli.command, &cli.args));
}

fn run(command: &str, args: &[String]) -> i32 {
    // The single non-override positional (no '=') is the config path.
    let mut config_path: Option<PathBuf> = None;
    let mut overrides: Vec<String> = Vec::new();
    for a in args {
        if a.contains('=') {
            overrides.push(a.clone());
        } else if config_path.is_none() {
            config_path = Some(PathBuf::from(a));
        } else {
            eprintln!("error: unexpected positional argument '{a}' (config path already given)");
            return 1;
        }
    }
    let cfg = match ExperimentConfig::load(config_path.as_deref(), &overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return 1;
        }
    };
    match dispatch(command, &cfg) {
        Ok(CmdOutcome::Ok) => 0,
        Ok(CmdOutcome::PartialFailure) => 3,
        Err(e @ CmdError::Validation(_)) | Err(e @ CmdError::Runtime(_)) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}
