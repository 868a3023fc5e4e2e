//! Configuration, manifests and subcommand runners behind the `uniedit` binary.

pub mod config;
pub mod manifest;
pub mod run;
pub mod synthetic;

pub use config::{ConfigError, RunConfig};
pub use manifest::Manifest;
pub use run::{execute, Command};

/// Exit codes of the binary.
pub mod exit {
    pub const OK: i32 = 0;
    pub const CONFIG: i32 = 2;
    pub const RUNTIME: i32 = 3;
}

/// Exit code for an error: configuration problems (including ones the
/// engine reports) are 2, everything else is 3.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<ConfigError>().is_some() {
        return exit::CONFIG;
    }
    match err.downcast_ref::<uniedit_core::Error>() {
        Some(uniedit_core::Error::Config(_)) => exit::CONFIG,
        _ => exit::RUNTIME,
    }
}
