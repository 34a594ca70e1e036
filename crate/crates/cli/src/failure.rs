//! Error classes that decide the process exit code.

use std::fmt;
use std::process::ExitCode;

/// Bad flags, missing required options, or an unreadable config file.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// Some patients failed and were skipped; the rest of the output is valid.
#[derive(Debug)]
pub struct Partial {
    pub failed: usize,
    pub total: usize,
}

impl fmt::Display for Partial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} of {} patients failed", self.failed, self.total)
    }
}

impl std::error::Error for Partial {}

/// A self-check inside the tool did not hold.
#[derive(Debug)]
pub struct Internal(pub String);

impl fmt::Display for Internal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "internal invariant violated: {}", self.0)
    }
}

impl std::error::Error for Internal {}

pub const OK: u8 = 0;
pub const USAGE: u8 = 1;
pub const DATA: u8 = 2;
pub const INTERNAL: u8 = 3;

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

pub fn exit_code(err: &anyhow::Error) -> ExitCode {
    let code = if err.chain().any(|e| e.is::<Internal>()) {
        INTERNAL
    } else if err.chain().any(|e| e.is::<Usage>()) {
        USAGE
    } else {
        DATA
    };
    ExitCode::from(code)
}
