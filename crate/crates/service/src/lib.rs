//! HTTP service, command line and use-case simulators for the auditbox engine.

pub mod app;
pub mod cli;
pub mod client;
pub mod config;
pub mod error;
pub mod http;
pub mod sim;
