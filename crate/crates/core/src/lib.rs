//! Allocation-only core of the psydef pipeline.
//!
//! Everything in this crate is pure computation over owned data: corpus
//! validation, the backend gateway traits and their deterministic stubs,
//! prompt rendering and reply parsing, augmentation planning, synthetic data
//! quality metrics, DMRS-derived features, the late-fusion classifier with
//! its training loop, and evaluation analytics. File formats, live HTTP
//! backends and the command line live in the `psydef` crate.

#![no_std]
#![allow(clippy::too_many_arguments, clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod augmentor;
pub mod backends;
pub mod corpus;
pub mod evaluation;
pub mod features;
pub mod fusion;
pub mod hash;
mod label;
pub mod quality;
pub mod stressor;
pub mod template;
pub mod text;

pub use label::{Label, LabelError, NUM_LABELS};

/// The majority class ("High-Adaptive"), never augmented.
pub const MAJORITY_LABEL: Label = Label::HIGH_ADAPTIVE;
