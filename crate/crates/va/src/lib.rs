//! File formats, remote providers, the HTTP service and the command line
//! around [`va_core`].

pub mod app;
pub mod cli;
pub mod config;
pub mod corpus_io;
pub mod eval;
pub mod remote;
pub mod service;
pub mod snapshot;

pub use app::{AppError, Pipeline};
pub use config::Config;
