//! Pipeline orchestration behind the `desco` binary: streaming JSONL I/O,
//! sharded parallel query generation, and the reporting subcommands.
//!
//! Everything here is callable as a library so integration tests can drive
//! the exact code paths the binary uses.

pub mod commands;
pub mod config;
pub mod pipeline;

pub use config::PipelineConfig;
pub use pipeline::{run_gen_queries, GenQueriesArgs, RunStats};
