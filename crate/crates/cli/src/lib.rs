//! Host and target entrypoints for the `bench-host` and `bench-target`
//! binaries, plus report serialization.

pub mod host;
pub mod report;
pub mod spec;
pub mod target;

/// Session reached `done`.
pub const EXIT_OK: i32 = 0;
/// Session ran but failed; partial reports may exist.
pub const EXIT_SESSION_FAILED: i32 = 1;
/// Bad spec, dataset or power log. Nothing was written.
pub const EXIT_INVALID_INPUT: i32 = 2;
/// Broker unreachable after all connection attempts.
pub const EXIT_UNREACHABLE: i32 = 3;

/// Logging to stderr, filtered by `BENCH_LOG_LEVEL` (default `info`).
pub fn init_logging() {
    let env = env_logger::Env::new().filter_or("BENCH_LOG_LEVEL", "info");
    let _ = env_logger::Builder::from_env(env).format_timestamp_millis().try_init();
}
