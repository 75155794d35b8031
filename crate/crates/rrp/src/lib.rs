//! File formats, experiment commands and the command-line front end for the
//! `rrp-core` crowd-counting library.

pub mod ablate;
pub mod annotations;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod gradsuite;
pub mod labelfile;
pub mod netpbm;

pub use config::RunConfig;
pub use error::{Error, Result};
