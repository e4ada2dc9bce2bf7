//! Multi-resolution cascaded classification of colorectal-polyp patches.
//!
//! `scalespace` maps physical scales to pixel tiles, `dataset` indexes and
//! synthesises labelled patch corpora, `backbone` trains the patch
//! classifiers, `cascade` combines them into the three-stage decision and
//! `metrics` scores the result. `pipeline` wires these together for the CLI
//! and the acceptance suite.

// Negated float comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backbone;
pub mod cascade;
pub mod config;
pub mod dataset;
pub mod error;
pub mod metrics;
pub mod pipeline;
pub mod scalespace;

pub use error::{Error, Result};
