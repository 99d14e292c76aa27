//! `more`: batch front end for training, evaluating and analyzing mixtures
//! of regression experts.
//!
//! Exit codes: 0 success, 1 runtime or I/O failure, 2 usage error.

mod args;
mod commands;
mod config;
mod io;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

/// A problem with how the tool was invoked; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn main() -> ExitCode {
    let raw: Vec<String> = std::env::args().collect();
    let argv = match config::inject_config(raw) {
        Ok(a) => a,
        Err(e) => return report(&e),
    };
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = configure_threads(cli.threads) {
        return report(&e);
    }
    let result = match &cli.command {
        Command::Synth(a) => commands::synth(a, &cli),
        Command::Fit(a) => commands::fit(a, &cli),
        Command::Predict(a) => commands::predict(a, &cli),
        Command::Evaluate(a) => commands::evaluate(a, &cli),
        Command::SelectK(a) => commands::select_k(a, &cli),
        Command::Crossval(a) => commands::crossval(a, &cli),
        Command::BaselineRidge(a) => commands::baseline_ridge(a, &cli),
        Command::Analyze(a) => commands::analyze(a, &cli),
        Command::Cluster(a) => commands::cluster(a, &cli),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(&e),
    }
}

fn configure_threads(threads: usize) -> anyhow::Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| anyhow::anyhow!("cannot start thread pool: {e}"))
}

fn report(e: &anyhow::Error) -> ExitCode {
    if let Some(u) = e.downcast_ref::<UsageError>() {
        eprintln!("error: {u}");
        return ExitCode::from(2);
    }
    eprintln!("error: {e:#}");
    ExitCode::from(1)
}
