//! SLA-aware upgrade coordination for IaaS clouds, with a deterministic cloud
//! simulator and a fixed-batch rolling-upgrade baseline to compare against.

pub mod baseline;
pub mod catalog;
pub mod cli;
pub mod cluster;
pub mod control;
pub mod coordinator;
pub mod engine;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod migration;
pub mod planner;
pub mod presets;
pub mod request;
pub mod scenario;
pub mod schedule;
pub mod types;

pub use error::{Error, Result};
