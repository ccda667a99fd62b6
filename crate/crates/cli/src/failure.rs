//! Exit-code classification: 2 for usage or configuration errors, 1 for
//! failures while running.

use std::fmt;
use std::process::ExitCode;

use stmoe_core::Error;

#[derive(Debug)]
pub enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

pub fn usage(msg: impl fmt::Display) -> Failure {
    Failure::Usage(anyhow::anyhow!("{msg}"))
}

impl Failure {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            Failure::Usage(_) => ExitCode::from(2),
            Failure::Runtime(_) => ExitCode::from(1),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(e) => write!(f, "usage error: {e:#}"),
            Failure::Runtime(e) => write!(f, "error: {e:#}"),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.into()),
            _ => Failure::Runtime(e.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast::<Error>() {
            Ok(core) => core.into(),
            Err(e) => Failure::Runtime(e),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}
