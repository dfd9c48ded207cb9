//! `amcfg` command-line driver.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage or
//! configuration errors.

mod args;
mod commands;

use std::process::ExitCode;

use clap::Parser;
use tracing_subscriber::EnvFilter;

use amcfg::eval::EvalError;
use amcfg::gbdt::GbdtError;

pub use args::load_config_file;
use args::{Cli, Command};

/// A problem with the invocation or its configuration (exit code 2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn is_usage_error(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.is::<UsageError>()
            || matches!(
                e.downcast_ref::<EvalError>(),
                Some(
                    EvalError::Config(_)
                        | EvalError::Spec(_)
                        | EvalError::MissingModality(_)
                        | EvalError::TooFewGroups { .. }
                        | EvalError::TooFewFolds(_)
                        | EvalError::Gbdt(GbdtError::InvalidParams(_))
                )
            )
            || matches!(e.downcast_ref::<GbdtError>(), Some(GbdtError::InvalidParams(_)))
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let filter = cli
        .log
        .as_deref()
        .map(EnvFilter::new)
        .unwrap_or_else(|| EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .init();

    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure thread pool: {e}");
            return ExitCode::from(1);
        }
    }

    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Run(a) => commands::run(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::SweepK(a) => commands::sweep(a),
        Command::Viz(a) => commands::viz(a),
        Command::Importance(a) => commands::importance(a),
        Command::AnchorsBuild(a) => commands::anchors_build(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e)
            if e.chain().any(|c| {
                c.downcast_ref::<std::io::Error>()
                    .is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe)
            }) =>
        {
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_usage_error(&e) { 2 } else { 1 })
        }
    }
}
