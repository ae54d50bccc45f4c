//! Command-line pipeline around `weaklabel-core`: configuration resolution,
//! batch manifests and per-stage execution.

pub mod config;
pub mod manifest;
pub mod ops;
pub mod runner;
