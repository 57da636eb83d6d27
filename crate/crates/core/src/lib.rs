//! Streaming, explainable, event-based load monitoring for high-frequency
//! voltage and current measurements.
//!
//! The processing chain, one module per stage:
//!
//! 1. [`fitps`] cuts the raw stream at voltage rising zero-crossings and
//!    resamples every cycle to a fixed length.
//! 2. [`detector`] computes per-cycle active power and flags on/off events
//!    with a sliding-window z-score.
//! 3. [`signature`] estimates the switched appliance's current cycle as the
//!    elementwise median of post-event minus pre-event currents.
//! 4. [`features`] turns a signature into eight Fourier features.
//! 5. [`gbdt`] classifies the features with a boosted tree ensemble.
//! 6. [`explain`] attributes each prediction to the features with exact
//!    Shapley values.
//!
//! [`pipeline`] strings the stages together over a stream, [`ingest`] reads
//! and synthesizes data, [`corpus`] provides a standard synthetic appliance
//! set and the dataset directory layout, and [`eval`] reproduces the
//! training/evaluation protocol. A narrative guide with runnable snippets
//! lives in the `book/` directory of the repository.

pub mod corpus;
pub mod detector;
pub mod error;
pub mod eval;
pub mod explain;
pub mod features;
pub mod fitps;
pub mod gbdt;
pub mod ingest;
pub mod pipeline;
pub mod signature;

pub use error::{Error, Result};

// The guide's code blocks run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/fitps.md")]
    mod fitps {}
    #[doc = include_str!("../../../book/src/detector.md")]
    mod detector {}
    #[doc = include_str!("../../../book/src/signature.md")]
    mod signature {}
    #[doc = include_str!("../../../book/src/features.md")]
    mod features {}
    #[doc = include_str!("../../../book/src/gbdt.md")]
    mod gbdt {}
    #[doc = include_str!("../../../book/src/explain.md")]
    mod explain {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/formats.md")]
    mod formats {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
