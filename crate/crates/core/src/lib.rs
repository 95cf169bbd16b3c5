//! Two-stage bowel-sound detector.
//!
//! Recordings are low-pass filtered and turned into normalized log-mel
//! spectrograms. A classification CNN scores 0.2 s windows slid across the
//! spectrogram; windows above a probability threshold are passed to a
//! regression CNN that places an interval (offset, scale) inside the window.
//! Confidence-weighted votes from overlapping windows are summed per time bin
//! and thresholded into the final intervals.

// Validation uses `!(x > 0.0)` style guards so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod audio;
pub mod config;
pub mod dataset;
pub mod error;
pub mod harness;
pub mod inference;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod spectrogram;
pub mod synth;
pub mod trainer;
pub mod util;

pub use error::{Error, Result};
