//! Command-line pipeline: manifests, configuration and stage orchestration.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod pipeline;
