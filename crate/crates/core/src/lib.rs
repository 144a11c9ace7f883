//! Desk-scale laboratory for attention regularization in grounded captioning.
//!
//! The crate trains a small LSTM attention captioner on a synthetic benchmark
//! with exact token-to-region gold alignments, optionally regularizing the
//! decoder's attention toward "ideal" weights computed from future target
//! tokens (constant and dynamic prophet variants), and measures the effect on
//! attention grounding.

pub mod autodiff;
pub mod captioner;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod grounding;
pub mod prophet;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};
