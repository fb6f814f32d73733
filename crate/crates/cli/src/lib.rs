//! The `snowball` command-line harness.

pub mod cache;
pub mod commands;
pub mod config;
pub mod eval;

/// A usage or configuration problem (exit status 2).
#[derive(Debug, Clone, PartialEq)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Maps a command result to a process exit status.
pub fn exit_status(result: &anyhow::Result<u8>) -> u8 {
    match result {
        Ok(s) => *s,
        Err(e) if e.downcast_ref::<UsageError>().is_some() => 2,
        Err(_) => 1,
    }
}
