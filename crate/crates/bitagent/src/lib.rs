//! File formats, configuration, reports and the command-line harness around
//! `bitagent-core`.

pub mod binio;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod manifest;
pub mod plots;
pub mod prompts;
pub mod report;
