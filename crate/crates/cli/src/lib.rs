//! Stage implementations behind the `ebclkit` command line.

pub mod config;
pub mod pipeline;
pub mod report;
pub mod workdir;

use std::io::Write;

/// Writes to stdout, treating a closed pipe as success.
pub fn emit(text: &str) -> std::io::Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => r,
    }
}
