//! Library surface of the CLI so the commands are callable from tests.

pub mod commands;
pub mod config;
