//! Synthetic motion data, simulated observations, binary file formats,
//! configuration and the command-line front end.

pub mod bench;
pub mod cli;
pub mod config;
pub mod error;
pub mod experiment;
pub mod formats;
pub mod observe;
pub mod synthetic;

pub use error::{HarnessError, Result};
