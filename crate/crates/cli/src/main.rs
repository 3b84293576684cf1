//! `retag` command-line driver.

mod commands;

use std::process::ExitCode;

use clap::Parser;

use retag::Error;

/// Exit codes: 0 success, 1 usage, 2 data, 3 numeric/verification.
pub(crate) fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 1,
        Error::Data(_) | Error::Format(_) | Error::Corruption(_) | Error::Io(_) | Error::Json(_) | Error::Length { .. } => 2,
        Error::Numeric(_)
        | Error::Verification(_)
        | Error::Contract(_)
        | Error::Dimension { .. }
        | Error::Range { .. } => 3,
    }
}

fn init_threads() -> Result<(), Error> {
    if let Ok(v) = std::env::var("RETAG_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("RETAG_THREADS must be a positive integer, got `{v}`")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match commands::Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match init_threads().and_then(|_| commands::run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
