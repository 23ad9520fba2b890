//! Command-line entry points and the HTTP service for demandforge.

pub mod cli;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod server;

pub use config::PipelineConfig;
pub use error::ApiError;
pub use pipeline::Pipeline;
pub use server::{router, AppState};
