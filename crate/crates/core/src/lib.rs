//! Inspection-guided restricted randomization.
//!
//! The crate covers the whole design loop: enumerate a pool of candidate
//! allocations, score each one with inspection metrics, restrict the pool to
//! an accepted set, diagnose that set, pre-register it, draw the official
//! allocation and analyze the experiment with an exact randomization test.
//! [`simgen`] and [`pipeline`] add the synthetic data generators and the
//! simulation harness used to study the designs.

pub mod allocation;
pub mod bundle;
pub mod data;
pub mod design;
pub mod diagnostics;
pub mod enumerate;
pub mod error;
pub mod ext;
pub mod fitness;
pub mod genetic;
pub mod inference;
pub mod metrics;
pub mod par;
pub mod pipeline;
pub mod rng;
pub mod simgen;

pub use allocation::{
    dedup, Allocation, AllocationPool, Candidate, GroupDesign, Level, Provenance,
};
pub use data::{ClusterMap, Column, CovariateMatrix, CovariateSidecar, InterferenceNetwork};
pub use error::{Error, Result};
pub use rng::RngSpec;

/// Version stamped into pre-registration bundles.
pub const CORE_VERSION: &str = env!("CARGO_PKG_VERSION");
