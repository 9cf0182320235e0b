//! Continual-learning experiment engine.
//!
//! A model is trained on a *stream* of experiences — datasets that arrive one
//! at a time — and evaluated for how much it forgets earlier ones. The crate
//! provides the full loop: benchmark generators, a plugin-based training
//! engine with replay/regularization strategies, growing classifier heads,
//! metric collection with exact accounting, and checkpoint/resume that
//! reproduces an uninterrupted run byte for byte.
//!
//! Numeric kernels are data-parallel via rayon under the default `parallel`
//! feature; disabling it yields the same results (bit-identical) on one
//! thread.

pub mod benchmarks;
pub mod buffers;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod idx;
pub mod logging;
pub mod matrix;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
pub use matrix::Matrix;
