//! Desk-scale mmWave vibrometry ASR pipeline: FMCW radar simulation and
//! demodulation, Mel feature extraction, a chunk-masked streaming Transformer
//! with triggered attention, hybrid CTC/attention training with cross-modal
//! knowledge distillation, and joint beam-search decoding.
//!
//! The crate is `no_std` (alloc required); everything here is pure
//! computation. File formats, persistence and the batch CLI live in the
//! companion `mmasr-cli` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod corpus;
pub mod decoding;
pub mod features;
pub mod fft;
pub mod metrics;
pub mod model;
pub mod radar;
pub mod rng;
pub mod training;

pub use autodiff::{Gradients, Real, Tape, Tensor, TensorError, TensorId};
