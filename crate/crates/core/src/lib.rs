//! Selective self-supervised speech pre-training at desk scale.
//!
//! The pipeline: synthesize mixtures of toy speech and interference
//! ([`mixsim`]), encode waveforms with a strided convolutional frontend
//! ([`frontend`]), mask frame spans ([`masking`]), run a speaker-conditioned
//! transformer ([`sate`]) steered by enrollment embeddings ([`spkemb`]),
//! predict k-means pseudo-labels of the clean target ([`quantizer`]) at masked
//! frames from both corrupted views, and tie the two views together with a
//! cross-correlation objective ([`objective`]).  [`trainer`] owns the
//! optimization loop and checkpoints; [`evalsuite`] measures whether the
//! trained model actually attends to the enrolled speaker.
//!
//! Everything differentiable runs on the [`tensor`] tape, which is checked
//! against central differences in 64-bit precision.

pub mod audio;
pub mod config;
pub mod error;
pub mod evalsuite;
pub mod frontend;
pub mod masking;
pub mod mixsim;
pub mod model;
pub mod objective;
pub mod quantizer;
pub mod trainer;
pub mod real;
pub mod rng;
pub mod sate;
pub mod spkemb;
pub mod tensor;

pub use error::{Error, Result};
pub use real::Real;
