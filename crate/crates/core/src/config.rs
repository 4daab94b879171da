//! Experiment configuration: `[model]`, `[data]` and `[train]` sections in a
//! TOML file. Every key is optional; missing keys take the desk-scale
//! defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::AdamHyper;
use crate::synthdata::OracleConfig;

/// Optimization settings for all pipeline stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Seeds model initialization and every stage's batch order.
    pub seed: u64,
    pub source_steps: usize,
    pub align_steps: usize,
    pub adapt_steps: usize,
    pub batch_size: usize,
    pub adapt_batch_size: usize,
    pub source_peak_lr: f64,
    pub warmup_steps: usize,
    pub align_lr: f64,
    pub adapt_lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    /// Weight of the latent alignment loss next to reconstruction.
    pub alignment_weight: f64,
    /// Also adapt the target speaker's embedding row.
    pub adapt_speaker_row: bool,
    /// Untranscribed utterances used by the main adaptation arm.
    pub adapt_utterances: usize,
    /// Adaptation-set sizes of the data sweep.
    pub sweep_sizes: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 7,
            source_steps: 2000,
            align_steps: 500,
            adapt_steps: 200,
            batch_size: 8,
            adapt_batch_size: 4,
            source_peak_lr: 1e-3,
            warmup_steps: 100,
            align_lr: 1e-4,
            adapt_lr: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_epsilon: 1e-9,
            alignment_weight: 1.0,
            adapt_speaker_row: true,
            adapt_utterances: 50,
            sweep_sizes: vec![1, 2, 5, 10, 20, 50, 100],
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamHyper {
        AdamHyper { beta1: self.adam_beta1, beta2: self.adam_beta2, epsilon: self.adam_epsilon }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.adapt_batch_size == 0 {
            return Err(Error::Config("train batch sizes must be positive".into()));
        }
        for (name, lr) in [("source_peak_lr", self.source_peak_lr), ("align_lr", self.align_lr), ("adapt_lr", self.adapt_lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("train.{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_epsilon > 0.0) {
            return Err(Error::Config("Adam betas must lie in [0, 1) and epsilon must be positive".into()));
        }
        if !(self.alignment_weight >= 0.0 && self.alignment_weight.is_finite()) {
            return Err(Error::Config("train.alignment_weight must be finite and non-negative".into()));
        }
        if self.adapt_utterances == 0 || self.sweep_sizes.contains(&0) {
            return Err(Error::Config("adaptation set sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub data: OracleConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    /// Effective configuration, with every default spelled out.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration is always representable")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        self.train.validate()?;
        let (m, d) = (&self.model, &self.data);
        if m.mel_dim != d.mel_dim {
            return Err(Error::Config(format!("model.mel_dim {} differs from data.mel_dim {}", m.mel_dim, d.mel_dim)));
        }
        if m.phoneme_vocab_size != d.phoneme_vocab_size {
            return Err(Error::Config("model and data phoneme vocabularies differ".into()));
        }
        if m.n_speakers < d.n_speakers() {
            return Err(Error::Config(format!(
                "model.n_speakers {} cannot hold the {} speakers of the corpus",
                m.n_speakers,
                d.n_speakers()
            )));
        }
        let max_frames = ((d.max_base_duration as f64) * 1.4).round() as usize;
        if m.max_duration < max_frames {
            return Err(Error::Config(format!("model.max_duration must be at least {max_frames}")));
        }
        Ok(())
    }
}
