//! Core library for the `sqnt` toolkit.
//!
//! Pieces fit together in a pipeline: quantize the weights of a small
//! two-modality autoregressive decoder ([`quant`], [`mbq`], [`model`]),
//! run greedy decoding to collect per-sample prediction records, score
//! confidence with MaxProb or a trained selector ([`confidence`]), and
//! evaluate selective-prediction reliability ([`metrics`]). [`synth`]
//! generates the deterministic toy task the pipeline runs on and [`io`]
//! owns the on-disk formats.

pub mod confidence;
pub mod error;
pub mod io;
pub mod linalg;
pub mod mbq;
pub mod metrics;
pub mod model;
pub mod quant;
pub mod rng;
pub mod synth;

pub use error::{Error, Result};
