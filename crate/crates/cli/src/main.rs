//! `cedar` command-line tool.

// `!(x > 0.0)` is used deliberately so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;

use std::process::ExitCode;

use cedar_core::CedarError;
use clap::error::ErrorKind;
use clap::Parser;

use commands::{Cli, CliError};

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("CEDAR_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n >= 1).ok_or_else(|| {
        CliError::Usage(format!(
            "CEDAR_THREADS must be a positive integer, got {raw:?}"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))
}

fn exit_code(err: &CliError) -> u8 {
    match err {
        CliError::Usage(_) => 1,
        CliError::Trend(_) => 3,
        CliError::Core(e) => match e {
            CedarError::Argument(_) => 1,
            CedarError::Io(_)
            | CedarError::Format { .. }
            | CedarError::Dimension(_)
            | CedarError::Index { .. }
            | CedarError::Data(_)
            | CedarError::Degenerate(_) => 2,
            CedarError::Numeric(_)
            | CedarError::Diverged { .. }
            | CedarError::Unreachable { .. }
            | CedarError::UndefinedMetric(_) => 3,
        },
        CliError::Output(_) => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match configure_threads().and_then(|()| commands::run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
