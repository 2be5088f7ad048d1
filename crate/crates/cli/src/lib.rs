//! Library side of the `nmt` command: run configuration, toy data and experiment recipes.

pub mod commands;
pub mod config;
pub mod experiment;
pub mod toy;
