//! Network service and command-line shell around the convrec agent.

pub mod api;
pub mod commands;
pub mod config;
pub mod runtime;
