//! Working-alliance assessment for text-based counseling transcripts.
//!
//! The crate loads a question rubric, ingests transcripts, builds
//! guideline-conditioned rating prompts, runs them against pluggable rater
//! backends, and turns the resulting ratings into reliability, alignment and
//! downstream reports.

pub mod analysis;
pub mod feedback;
pub mod promptkit;
pub mod rater;
pub mod rubric;
pub mod stats;
pub mod transcript;
