//! HTTP service and command-line interface around `tlqa-core`.

pub mod api;
pub mod cli;
pub mod config;
pub mod state;
