//! Command-line front end for `loopdet-core`: TOML experiment configs in,
//! JSON result records out.

pub mod config;
pub mod error;
pub mod record;
pub mod run;

pub use config::ExperimentConfig;
pub use error::CliError;
pub use record::{compare, ResultRecord};

/// Exit status when a run completes but one of its checks fails.
pub const EXIT_CERTIFICATE: i32 = 3;
