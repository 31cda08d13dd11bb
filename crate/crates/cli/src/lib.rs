//! Experiment runner and interactive retrieval service.

pub mod app;
pub mod config;
pub mod data;
pub mod error;
pub mod export;
pub mod runs;
pub mod service;
pub mod session;
pub mod store;

pub use error::{CliError, Result};
