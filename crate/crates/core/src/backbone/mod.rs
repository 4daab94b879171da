//! Source TTS model: phoneme encoder, length regulator, variance predictors,
//! acoustic condition modelling and a decoder whose layer norms are
//! conditioned on a speaker embedding.

pub mod config;
mod gradcheck;
mod graph;
pub mod layers;
mod model;
mod params;
mod types;

pub use config::ModelConfig;
pub use gradcheck::check_param_gradients;
pub use graph::Graph;
pub(crate) use params::Builder;
pub use model::{
    length_regulate, round_log_durations, AcousticExtractor, AcousticSource, AcousticVectors, DurationSource,
    PitchSource, TtsInputs, TtsModel, TtsOutput,
};
pub use params::{GroupSet, ParamEntry, ParamId, ParamStore, ParameterGroup};
pub use types::{DurationSequence, PhonemeSequence, SpeakerContext};
