//! Command-line driver, instruct REPL and HTTP server for the `ngd` pipeline.

pub mod cli;
pub mod repl;
pub mod server;
pub mod session;

pub use cli::run_command;
