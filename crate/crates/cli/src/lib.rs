//! Configuration-driven experiment runner for the BGS solver library:
//! config parsing, seeded runs with CSV traces, the derivative check
//! harness, flow diagnostics, and problem serialization.

pub mod config;
pub mod runner;

/// Command-level failures, partitioned by exit code:
/// validation 1, numerical 2, I/O 3.
#[derive(Debug)]
pub enum CliError {
    Config(Vec<String>),
    Numerical(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Numerical(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(violations) => {
                writeln!(f, "configuration invalid:")?;
                for v in violations {
                    writeln!(f, "  {v}")?;
                }
                Ok(())
            }
            CliError::Numerical(msg) => write!(f, "numerical failure: {msg}"),
            CliError::Io(msg) => write!(f, "i/o failure: {msg}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<bgs_core::Error> for CliError {
    fn from(e: bgs_core::Error) -> Self {
        use bgs_core::Error::*;
        match e {
            InvalidInput(_) | PreconditionViolated(_) | Unsupported(_) => {
                CliError::Config(vec![e.to_string()])
            }
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<config::ConfigError> for CliError {
    fn from(e: config::ConfigError) -> Self {
        CliError::Config(e.violations)
    }
}
