//! The pluggable mel-spectrogram encoder and its latent alignment.
//!
//! The encoder maps mel frames into the space of the length-regulated phoneme
//! hidden sequence. Plugged in front of the decoder it gives a reconstruction
//! path that needs no transcript: pitch and acoustic condition are regressed
//! from the encoder output itself, exactly as the synthesis path regresses
//! them from the phoneme hidden.

use crate::backbone::layers::{add_positions, FftBlock, FftBlockSpec, Linear, Norm};
use crate::backbone::{Builder, Graph, ModelConfig, ParameterGroup, TtsModel};
use crate::error::{Error, Result, StageContext};
use crate::numerics::{Tensor, Var};

#[derive(Clone, Debug)]
pub struct MelEncoder {
    pub input: Linear,
    pub blocks: Vec<FftBlock>,
    pub norm: Norm,
}

impl MelEncoder {
    pub(crate) fn new(b: &mut Builder, config: &ModelConfig, spec: &FftBlockSpec) -> Self {
        let group = ParameterGroup::MelEncoder;
        let input = Linear::new(b, "mel_encoder.input", group, config.mel_dim, config.hidden_dim);
        let blocks = (0..config.n_mel_encoder_blocks)
            .map(|i| FftBlock::new(b, &format!("mel_encoder.block{i}"), group, spec))
            .collect();
        let norm = Norm::plain(b, "mel_encoder.final_norm", group, config.hidden_dim);
        MelEncoder { input, blocks, norm }
    }
}

/// `[T×mel_dim] → [T×d]`: input projection, positions, plain-norm FFT blocks.
pub fn mel_encoder_forward(model: &TtsModel, g: &mut Graph, mel: Var) -> Result<Var> {
    let cfg = model.config();
    let shape = g.tape.value(mel).shape().to_vec();
    if shape.len() != 2 || shape[1] != cfg.mel_dim {
        return Err(Error::shape("mel_encoder_forward", format!("expected [T×{}], got {shape:?}", cfg.mel_dim)));
    }
    let enc = model.mel_encoder();
    let x = enc.input.forward(g, mel)?;
    let mut x = add_positions(g, x)?;
    for block in &enc.blocks {
        x = block.forward(g, x, None, cfg.layer_norm_eps)?;
    }
    enc.norm.forward(g, x, None, cfg.layer_norm_eps)
}

/// Frame-aligned pair for the latent alignment loss, with a frame mask for
/// padded batches.
#[derive(Clone, Debug)]
pub struct AlignmentBatch {
    pub mel_hidden: Var,
    pub phoneme_hidden_expanded: Var,
    pub mask: Vec<bool>,
}

impl AlignmentBatch {
    /// All frames valid.
    pub fn unpadded(g: &Graph, mel_hidden: Var, phoneme_hidden_expanded: Var) -> Self {
        let rows = g.tape.value(mel_hidden).rows();
        AlignmentBatch { mel_hidden, phoneme_hidden_expanded, mask: vec![true; rows] }
    }
}

/// Mean squared difference over unmasked `(frame, dim)` entries. The phoneme
/// side is detached: only the mel-encoder output receives gradient.
pub fn alignment_loss(g: &mut Graph, batch: &AlignmentBatch) -> Result<Var> {
    let target = g.tape.detach(batch.phoneme_hidden_expanded);
    g.tape.masked_mean_sq_diff(batch.mel_hidden, target, &batch.mask)
}

/// Pitch and acoustic condition regressed from a frame-level hidden sequence.
#[derive(Clone, Copy, Debug)]
pub struct MelConditions {
    /// `[T]`
    pub pitch: Var,
    /// `[T×acoustic_dim]`
    pub acoustic: Var,
}

pub fn extract_mel_conditions(model: &TtsModel, g: &mut Graph, mel_hidden: Var) -> Result<MelConditions> {
    let pitch = model.predict_pitch(g, mel_hidden)?;
    let acoustic = model.predict_acoustic(g, mel_hidden)?;
    Ok(MelConditions { pitch, acoustic })
}

#[derive(Clone, Copy, Debug)]
pub struct ReconstructionOutput {
    /// `[T×mel_dim]`
    pub mel: Var,
    /// `[T×d]` mel-encoder output at the decoder boundary.
    pub mel_hidden: Var,
    pub conditions: MelConditions,
}

/// Reconstructs `mel_in` through the mel encoder and decoder. Takes no
/// phoneme input: the mel-encoder output stands in for the expanded phoneme
/// hidden, and pitch/acoustic conditions come from that output.
pub fn reconstruction_forward(
    model: &TtsModel,
    g: &mut Graph,
    mel_in: &Tensor,
    speaker_id: u32,
) -> Result<ReconstructionOutput> {
    let mel = g.tape.constant(mel_in.clone());
    let mel_hidden = mel_encoder_forward(model, g, mel).stage("mel encoder")?;
    let conditions = extract_mel_conditions(model, g, mel_hidden).stage("condition extraction")?;
    let x = model.pitch_pathway(g, mel_hidden, conditions.pitch).stage("pitch pathway")?;
    let x = model.acoustic_pathway(g, x, conditions.acoustic).stage("acoustic pathway")?;
    let speaker = model.speaker(g, speaker_id).stage("speaker")?;
    let mel = model.decode(g, x, &speaker).stage("decoder")?;
    Ok(ReconstructionOutput { mel, mel_hidden, conditions })
}

#[cfg(test)]
mod tests;
