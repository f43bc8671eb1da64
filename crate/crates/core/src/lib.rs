//! Deterministic simulator of fault recovery in a partitioned stream-processing
//! cluster, with an offline detector for failure and recovery times.
//!
//! Pipeline: a [`scenario::ScenarioConfig`] drives [`engine::run`], which
//! produces [`engine::RunArtifacts`]; [`metrics`] turns those into CSV traces
//! and [`detector`] judges recovery on them.

pub mod cli;
pub mod detector;
pub mod engine;
pub mod failure;
pub mod metrics;
pub mod rebalance;
pub mod scenario;
