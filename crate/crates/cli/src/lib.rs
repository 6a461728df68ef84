//! Command-line driver: run configs, the six commands and their pass/fail outcomes.

pub mod commands;
pub mod experiment;
pub mod settings;
