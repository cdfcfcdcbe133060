//! File formats, pipelines and the command line around `ecibench-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod run;
