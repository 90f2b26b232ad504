//! Speaker-verification scoring back-end.
//!
//! Turns pre-computed speaker embeddings into evaluated verification
//! decisions: cosine trial scoring, cohort-based adaptive score
//! normalization (S-Norm), quality-aware logistic-regression calibration,
//! multi-system fusion, and EER/minDCF evaluation. A deterministic synthetic
//! generator ([`simkit`]) and an augmentation-manifest planner ([`augplan`])
//! round out the toolkit for desk-scale, end-to-end pipeline runs.
//!
//! Every stage except [`simkit::generate`] is deterministic: identical
//! inputs produce bit-identical outputs, independent of thread count.

#![forbid(unsafe_code)]

pub mod augplan;
pub mod calibrate;
pub mod corpus;
mod error;
pub mod fuse;
pub mod metrics;
pub mod normalize;
pub mod scoring;
pub mod simkit;

pub use error::{Error, Result};
