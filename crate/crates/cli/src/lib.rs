//! Library side of the `posm` command-line tool.

pub mod args;
pub mod commands;
pub mod config;
pub mod estimator;
pub mod manifest;
pub mod run;

/// Bad arguments or configuration; exits with status 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

/// Process exit status for a failed command.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<posm_core::Error>() {
            return if e.is_numerical() {
                EXIT_NUMERICAL
            } else if e.is_io() {
                EXIT_IO
            } else {
                EXIT_USAGE
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_IO;
        }
    }
    1
}

/// Caps the global worker pool at `POSM_THREADS` when set.
pub fn configure_threads() -> anyhow::Result<()> {
    if let Ok(value) = std::env::var("POSM_THREADS") {
        let n: usize = value
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| UsageError(format!("POSM_THREADS must be a positive integer, got '{value}'")))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}
