//! Hallucination snowballing harness: sample records, conversation settings, dataset
//! curation, metrics, and residual visual decoding.

pub mod backend;
pub mod builder;
pub mod conversation;
pub mod decoding;
pub mod generator;
pub mod hashing;
pub mod metrics;
pub mod prompt;
pub mod record;
pub mod sim;
pub mod wpi;

#[cfg(any(test, feature = "fixtures"))]
pub mod fixtures;
