//! Command-line workflows for the `latent-rt` model: simulate, loglik, fit, check.

pub mod commands;
pub mod config;
pub mod data;

pub use commands::{run, Cli};
