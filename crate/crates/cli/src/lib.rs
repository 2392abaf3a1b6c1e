//! Command-line lifecycle tool and HTTP gateway for hint-based SLM/LLM
//! inference.

pub mod commands;
pub mod config;
pub mod gateway;

pub use commands::{error_json, run, Cli, CliError};
pub use gateway::{Gateway, GatewayMetrics};
