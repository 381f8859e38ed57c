//! Frame-level probing of per-layer activations from speech-recognition networks.
//!
//! Activations are stored per layer and utterance as `.act` blocks, aligned to
//! time-stamped labels, and fed to small MLP classifiers whose test accuracy
//! measures how much linguistic information each layer encodes.

pub mod alignment;
pub mod cli;
pub mod error;
pub mod experiments;
pub mod feature_maps;
pub mod metrics;
pub mod probe;
pub mod report;
pub mod synth;
pub mod tensor_store;

pub use error::{Error, Result};
