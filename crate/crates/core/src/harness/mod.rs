//! Experiment harness: configuration files, run directories, manifests and
//! the command-line entry points.

pub mod cli;
pub mod commands;
mod config;
mod fsutil;
mod manifest;

pub use config::{config_to_toml, load_config, parse_config};
pub use fsutil::write_atomic;
pub use manifest::{unix_now, FileEntry, RunManifest, MANIFEST_FILE, MANIFEST_FORMAT};
