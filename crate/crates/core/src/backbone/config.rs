use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters. `Default` is the desk-scale configuration;
/// [`ModelConfig::full_scale`] carries the full-size values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub ffn_filter: usize,
    /// Kernel of the first feed-forward convolution; the second is pointwise.
    pub conv_kernel: usize,
    pub n_encoder_blocks: usize,
    pub n_decoder_blocks: usize,
    pub n_mel_encoder_blocks: usize,
    pub mel_dim: usize,
    pub phoneme_vocab_size: usize,
    pub speaker_embedding_dim: usize,
    /// Rows in the speaker table (source speakers plus adaptation slots).
    pub n_speakers: usize,
    pub max_duration: usize,
    /// Width of the phoneme-level acoustic condition vectors.
    pub acoustic_dim: usize,
    pub predictor_filter: usize,
    pub predictor_kernel: usize,
    pub layer_norm_eps: f64,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_dim: 32,
            n_heads: 2,
            ffn_filter: 64,
            conv_kernel: 9,
            n_encoder_blocks: 4,
            n_decoder_blocks: 4,
            n_mel_encoder_blocks: 4,
            mel_dim: 16,
            phoneme_vocab_size: 24,
            speaker_embedding_dim: 8,
            n_speakers: 10,
            max_duration: 16,
            acoustic_dim: 4,
            predictor_filter: 32,
            predictor_kernel: 3,
            layer_norm_eps: 1e-5,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn full_scale() -> Self {
        ModelConfig {
            hidden_dim: 256,
            n_heads: 2,
            ffn_filter: 1024,
            conv_kernel: 9,
            mel_dim: 80,
            speaker_embedding_dim: 256,
            predictor_filter: 256,
            ..ModelConfig::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("hidden_dim", self.hidden_dim),
            ("n_heads", self.n_heads),
            ("ffn_filter", self.ffn_filter),
            ("conv_kernel", self.conv_kernel),
            ("n_encoder_blocks", self.n_encoder_blocks),
            ("n_decoder_blocks", self.n_decoder_blocks),
            ("n_mel_encoder_blocks", self.n_mel_encoder_blocks),
            ("mel_dim", self.mel_dim),
            ("phoneme_vocab_size", self.phoneme_vocab_size),
            ("speaker_embedding_dim", self.speaker_embedding_dim),
            ("n_speakers", self.n_speakers),
            ("max_duration", self.max_duration),
            ("acoustic_dim", self.acoustic_dim),
            ("predictor_filter", self.predictor_filter),
            ("predictor_kernel", self.predictor_kernel),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.hidden_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} is not divisible by n_heads {}",
                self.hidden_dim, self.n_heads
            )));
        }
        for (name, k) in [("conv_kernel", self.conv_kernel), ("predictor_kernel", self.predictor_kernel)] {
            if k % 2 == 0 {
                return Err(Error::Config(format!("{name} must be odd, got {k}")));
            }
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::Config("layer_norm_eps must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }
}
