//! Configuration, checkpoints, exports and the pipeline commands behind the
//! `acpo` binary.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod export;
pub mod pipeline;

pub use config::RunConfig;
pub use error::CliError;
