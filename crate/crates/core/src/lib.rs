//! CDF smoothing for learned indexes.
//!
//! Virtual keys are inserted into a key set so that a linear indexing function fits the
//! key→rank mapping better; in a hierarchical index the smoothed subtrees can then be
//! merged into shallower nodes. The crate provides:
//!
//! - [`model`]: least-squares fitting and O(1) refit/loss/derivative for one extra key
//! - [`smoothing`]: greedy insertion of up to `λ` virtual keys
//! - [`index`]: a reference hierarchical index with exact-placement and gapped-array nodes
//! - [`csv`]: bottom-up subtree merging gated by error and cost conditions
//! - [`oracle`]: brute-force reference implementations for testing
//! - [`workloads`]: datasets, query samplers and read-write batches

// `!(x > 0.0)` style checks are there to reject NaN too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod csv;
pub mod error;
pub mod index;
pub mod model;
pub mod oracle;
pub mod smoothing;
pub mod workloads;

pub use error::{Error, Result};
pub use model::{fit_direct, CandidatePoint, FitAggregates, LinearModel, SortedKeySet};
pub use smoothing::{smooth, SmoothingConfig, VirtualPointSet};
