//! Speaker-conditioned prosodic masked prediction for speech deepfake detection.
//!
//! The crate is organised as a pipeline:
//!
//! * [`corpus`] synthesises a deterministic toy-speech corpus with bona fide
//!   and prosodically deformed spoof utterances.
//! * [`prosody`] and [`speaker`] extract frame-level pitch/voicing/energy
//!   embeddings and per-speaker embeddings, which [`targets`] concatenates
//!   into the 200 x 448 masked-prediction target sequence.
//! * [`model`] is a small convolutional + transformer encoder with
//!   hand-written backward passes, [`masking`] and [`objective`] provide span
//!   masking, InfoNCE with structured negatives and weighted cross-entropy.
//! * [`trainer`] runs the real-speech-only first stage and the two-pass joint
//!   second stage, and [`eval`] scores trials and computes EER.

pub mod config;
pub mod corpus;
pub mod data;
pub mod error;
pub mod eval;
pub mod masking;
pub mod model;
pub mod objective;
pub mod prosody;
pub mod rng;
pub mod speaker;
pub mod targets;
pub mod trainer;

pub use error::{Error, Result};

/// Audio sample rate in Hz.
pub const SAMPLE_RATE: usize = 16_000;
/// Samples in one fixed 4 s segment.
pub const SEGMENT_SAMPLES: usize = 64_000;
/// Frame hop in samples (20 ms).
pub const HOP_SAMPLES: usize = 320;
/// Analysis window in samples (25 ms).
pub const WINDOW_SAMPLES: usize = 400;
/// Frames per segment; matches the encoder's token count.
pub const FRAMES: usize = SEGMENT_SAMPLES / HOP_SAMPLES;
/// Speaker block width of a target row.
pub const SPEAKER_DIM: usize = 192;
/// Prosodic block width of a target row.
pub const PROSODY_DIM: usize = 256;
/// Full target row width.
pub const TARGET_DIM: usize = SPEAKER_DIM + PROSODY_DIM;
