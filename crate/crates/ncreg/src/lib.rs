//! File formats, configuration and the `ncreg` command line around
//! [`ncreg_core`].

pub mod cli;
pub mod cloud_io;
pub mod config;
mod error;
pub mod manifest;
pub mod report;
pub mod weights;

pub use cloud_io::{read_cloud, write_cloud, CloudFormat};
pub use config::RunConfig;
pub use error::{CliError, CliResult};
pub use weights::{load_weights, save_weights};
