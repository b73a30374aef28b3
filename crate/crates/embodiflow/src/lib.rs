//! Episode files, checkpoints, CSV tables, experiment configuration and the
//! `embodiflow` command line, on top of `embodiflow-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod episodes;
pub mod experiment;
pub mod tables;
