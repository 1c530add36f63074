//! Ordinal regression with cumulative link models under the unconstrained
//! feature model.
//!
//! The crate covers the loss and its derivatives ([`clm`]), the reduced
//! equations of state and their phase transition ([`eos`]), direct
//! optimization of the feature model ([`ufm`]), collapse diagnostics
//! ([`metrics`]), a residual MLP trained with manual backpropagation ([`nn`]),
//! data ingestion ([`data`]), randomized property checks ([`propcheck`]),
//! and the configuration and file formats of the `onc` binary ([`cli`]).

// `!(x > 0.0)` deliberately rejects NaN along with nonpositive values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod clm;
pub mod data;
pub mod eos;
pub mod error;
pub mod link;
pub mod metrics;
pub mod nn;
pub mod propcheck;
pub mod rng;
pub mod ufm;

pub use clm::{ThresholdParams, Thresholds};
pub use error::{Error, Result};
pub use link::LinkKind;
