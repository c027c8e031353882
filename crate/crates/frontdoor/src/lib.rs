//! Deployable surface of the step router: an OpenAI-compatible HTTP proxy,
//! the command-line workflows, service configuration and the JSONL trace
//! sink.

pub mod cli;
pub mod config;
pub mod server;
pub mod sink;
