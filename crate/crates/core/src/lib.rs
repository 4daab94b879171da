//! Untranscribed-speech adaptation for a non-autoregressive TTS model.
//!
//! A source model (phoneme encoder, variance predictors, conditional-LN
//! decoder) is trained on transcribed data; a mel-spectrogram encoder is then
//! plugged in and aligned to the phoneme encoder's latent space while the
//! source model stays frozen; finally only the conditional layer norm is
//! fine-tuned on a new speaker's speech by reconstruction, with no transcript.

pub mod backbone;
mod binio;
pub mod config;
pub mod error;
pub mod evalmetrics;
pub mod melencoder;
pub mod numerics;
pub mod pipeline;
pub mod synthdata;

pub use error::{Error, Result};
