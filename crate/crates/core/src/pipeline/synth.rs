use super::checkpoint::Checkpoint;
use crate::backbone::{
    AcousticSource, DurationSequence, DurationSource, Graph, PhonemeSequence, PitchSource, TtsInputs, TtsModel,
};
use crate::error::Result;
use crate::evalmetrics::{mel_distance, ArmMetrics, DistanceMode, LengthPolicy, SpeakerStatistics};
use crate::numerics::Tensor;
use crate::synthdata::Utterance;

/// Transcript-only synthesis: predicted durations, pitch and acoustic
/// condition. Returns `[Σ durations × mel_dim]`.
pub fn synthesize(ckpt: &Checkpoint, phonemes: &[u32], speaker_id: u32) -> Result<Tensor> {
    let model = &ckpt.model;
    let phonemes = PhonemeSequence::new(phonemes.to_vec(), model.config().phoneme_vocab_size)?;
    let mut g = Graph::inference(model.params());
    let out = model.tts_forward(
        &mut g,
        TtsInputs {
            phonemes: &phonemes,
            speaker_id,
            durations: DurationSource::Predicted,
            pitch: PitchSource::Predicted,
            acoustic: AcousticSource::Predicted,
        },
    )?;
    Ok(g.tape.value(out.mel).clone())
}

/// Synthesis of `utt`'s text with its reference durations, so the output is
/// frame-aligned with the reference mel. Pitch and acoustic condition are
/// still predicted.
pub fn teacher_forced_synthesis(model: &TtsModel, utt: &Utterance, speaker_id: u32) -> Result<Tensor> {
    let phonemes = PhonemeSequence::new(utt.phonemes.clone(), model.config().phoneme_vocab_size)?;
    let durations = DurationSequence::paired(utt.durations.clone(), &phonemes)?;
    let mut g = Graph::inference(model.params());
    let out = model.tts_forward(
        &mut g,
        TtsInputs {
            phonemes: &phonemes,
            speaker_id,
            durations: DurationSource::Oracle(&durations),
            pitch: PitchSource::Predicted,
            acoustic: AcousticSource::Predicted,
        },
    )?;
    Ok(g.tape.value(out.mel).clone())
}

/// Per-utterance synthesis error and speaker proximity of one arm.
#[derive(Clone, Debug, PartialEq)]
pub struct ArmEvaluation {
    pub mae: ArmMetrics,
    pub proximity: ArmMetrics,
}

pub(crate) fn utterance_key(u: &Utterance) -> String {
    format!("s{:02}_u{:03}", u.speaker_id, u.utterance_id)
}

/// Scores `model` on each utterance's own speaker and text against the
/// reference mel.
pub fn evaluate_arm(
    model: &TtsModel,
    arm: &str,
    seed: u64,
    utterances: &[&Utterance],
    stats: &SpeakerStatistics,
) -> Result<ArmEvaluation> {
    let mut mae = ArmMetrics::new(arm, seed, "mel_mae");
    let mut proximity = ArmMetrics::new(arm, seed, "speaker_proximity");
    for u in utterances {
        let mel = teacher_forced_synthesis(model, u, u.speaker_id)?;
        let key = utterance_key(u);
        let d = mel_distance(&mel, &u.mel, DistanceMode::Mae, LengthPolicy::Exact)?;
        mae.values.insert(key.clone(), d.value);
        proximity.values.insert(key, stats.proximity(&mel, u.speaker_id)?);
    }
    Ok(ArmEvaluation { mae, proximity })
}
