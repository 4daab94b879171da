use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::graph::Graph;
use super::layers::{add_positions, Conv, FftBlock, FftBlockSpec, Linear, Norm, VariancePredictor};
use super::params::{Builder, ParamId, ParamStore, ParameterGroup};
use super::types::{DurationSequence, PhonemeSequence, SpeakerContext};
use crate::error::{Error, Result, StageContext};
use crate::melencoder::MelEncoder;
use crate::numerics::{Tensor, Var};

/// Source of the durations used by the length regulator.
#[derive(Clone, Copy, Debug)]
pub enum DurationSource<'a> {
    Oracle(&'a DurationSequence),
    Predicted,
}

/// Frame-level pitch fed to the decoder.
#[derive(Clone, Copy, Debug)]
pub enum PitchSource<'a> {
    Oracle(&'a [f64]),
    Predicted,
}

/// Phoneme-level acoustic condition fed to the decoder.
#[derive(Clone, Copy, Debug)]
pub enum AcousticSource<'a> {
    /// Extracted from this ground-truth mel (requires oracle durations).
    Extracted(&'a Tensor),
    Predicted,
}

#[derive(Clone, Copy, Debug)]
pub struct TtsInputs<'a> {
    pub phonemes: &'a PhonemeSequence,
    pub speaker_id: u32,
    pub durations: DurationSource<'a>,
    pub pitch: PitchSource<'a>,
    pub acoustic: AcousticSource<'a>,
}

/// Everything a forward pass produces that a loss or caller may need.
#[derive(Clone, Debug)]
pub struct TtsOutput {
    /// `[T×mel_dim]`
    pub mel: Var,
    /// `[L]`, predicted `ln(d + 1)`.
    pub log_durations: Var,
    /// `[T]`, the pitch predictor's output on the expanded hidden.
    pub pitch_prediction: Var,
    /// `[L×acoustic_dim]`
    pub acoustic_prediction: Var,
    /// `[L×acoustic_dim]`, present when the acoustic source is `Extracted`.
    pub acoustic_target: Option<Var>,
    /// `[L×d]` phoneme encoder output.
    pub phoneme_hidden: Var,
    /// `[T×d]` after length regulation, before pitch/acoustic additions.
    pub expanded_hidden: Var,
    /// Durations the length regulator used.
    pub durations: DurationSequence,
}

/// Utterance- and phoneme-level acoustic condition vectors.
#[derive(Clone, Copy, Debug)]
pub struct AcousticVectors {
    /// `[1×acoustic_dim]`
    pub utterance: Var,
    /// `[L×acoustic_dim]`
    pub phonemes: Var,
}

#[derive(Clone, Debug)]
pub struct AcousticExtractor {
    pub conv1: Conv,
    pub norm: Norm,
    pub conv2: Conv,
}

#[derive(Clone, Debug)]
struct Architecture {
    embedding: ParamId,
    encoder: Vec<FftBlock>,
    encoder_norm: Norm,
    duration: VariancePredictor,
    pitch: VariancePredictor,
    pitch_projection: Linear,
    acoustic_extractor: AcousticExtractor,
    acoustic_predictor: VariancePredictor,
    acoustic_projection: Linear,
    speaker_table: ParamId,
    decoder: Vec<FftBlock>,
    decoder_norm: Norm,
    mel_linear: Linear,
    mel_encoder: MelEncoder,
}

/// The full parameter set: source TTS model plus the pluggable mel encoder.
#[derive(Clone, Debug)]
pub struct TtsModel {
    config: ModelConfig,
    params: ParamStore,
    arch: Architecture,
}

/// Rounds predicted `ln(d + 1)` values to frame counts in `[1, max]`.
pub fn round_log_durations(log_durations: &[f64], max: usize) -> Vec<usize> {
    log_durations
        .iter()
        .map(|&p| {
            let frames = (p.exp() - 1.0).round();
            if frames.is_nan() {
                1
            } else {
                frames.clamp(1.0, max as f64) as usize
            }
        })
        .collect()
}

/// Repeats row `i` of `h` `durations[i]` times.
pub fn length_regulate(g: &mut Graph, h: Var, durations: &DurationSequence) -> Result<Var> {
    let rows = g.tape.value(h).rows();
    if durations.len() != rows {
        return Err(Error::Alignment(format!("{} durations for {rows} hidden rows", durations.len())));
    }
    if durations.total() == 0 {
        return Err(Error::EmptyOutput);
    }
    g.tape.gather_rows(h, &durations.expansion_index())
}

impl TtsModel {
    /// Builds a freshly initialized model; identical `(config, seed)` give
    /// bitwise identical parameters.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder { store: &mut params, rng: &mut rng };
        let c = &config;
        let d = c.hidden_dim;
        let plain = FftBlockSpec { hidden: d, heads: c.n_heads, filter: c.ffn_filter, kernel: c.conv_kernel, conditional: None };
        let cond = FftBlockSpec { conditional: Some(c.speaker_embedding_dim), ..plain };
        let predictor = |out| (d, c.predictor_filter, c.predictor_kernel, out);

        use ParameterGroup as G;
        let embedding = b.uniform("encoder.embedding", G::PhonemeEncoder, &[c.phoneme_vocab_size, d], 1.0);
        let encoder = (0..c.n_encoder_blocks)
            .map(|i| FftBlock::new(&mut b, &format!("encoder.block{i}"), G::PhonemeEncoder, &plain))
            .collect();
        let encoder_norm = Norm::plain(&mut b, "encoder.final_norm", G::PhonemeEncoder, d);
        let duration = VariancePredictor::new(&mut b, "duration", G::DurationPredictor, predictor(1));
        let pitch = VariancePredictor::new(&mut b, "pitch", G::PitchPredictor, predictor(1));
        let pitch_projection = Linear::new(&mut b, "pitch.projection", G::PitchPredictor, 1, d);
        let acoustic_extractor = AcousticExtractor {
            conv1: Conv::new(&mut b, "acoustic.extractor.conv1", G::AcousticCondition, 3, c.mel_dim, d),
            norm: Norm::plain(&mut b, "acoustic.extractor.norm", G::AcousticCondition, d),
            conv2: Conv::new(&mut b, "acoustic.extractor.conv2", G::AcousticCondition, 3, d, c.acoustic_dim),
        };
        let acoustic_predictor =
            VariancePredictor::new(&mut b, "acoustic.predictor", G::AcousticCondition, predictor(c.acoustic_dim));
        let acoustic_projection = Linear::new(&mut b, "acoustic.projection", G::AcousticCondition, c.acoustic_dim, d);
        let speaker_table =
            b.uniform("speaker.table", G::SpeakerTable, &[c.n_speakers, c.speaker_embedding_dim], 1.0);
        let decoder = (0..c.n_decoder_blocks)
            .map(|i| FftBlock::new(&mut b, &format!("decoder.block{i}"), G::DecoderCore, &cond))
            .collect();
        let decoder_norm = Norm::conditional(&mut b, "decoder.final_norm", c.speaker_embedding_dim, d);
        let mel_linear = Linear::new(&mut b, "decoder.mel_linear", G::MelLinear, d, c.mel_dim);
        let mel_encoder = MelEncoder::new(&mut b, c, &plain);

        let arch = Architecture {
            embedding,
            encoder,
            encoder_norm,
            duration,
            pitch,
            pitch_projection,
            acoustic_extractor,
            acoustic_predictor,
            acoustic_projection,
            speaker_table,
            decoder,
            decoder_norm,
            mel_linear,
            mel_encoder,
        };
        Ok(TtsModel { config, params, arch })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn mel_encoder(&self) -> &MelEncoder {
        &self.arch.mel_encoder
    }

    pub fn decoder_blocks(&self) -> &[FftBlock] {
        &self.arch.decoder
    }

    pub fn encoder_blocks(&self) -> &[FftBlock] {
        &self.arch.encoder
    }

    pub fn speaker_table_id(&self) -> ParamId {
        self.arch.speaker_table
    }

    /// Resets every speaker row from `n_trained` on to the mean of the trained
    /// rows, the starting point for speakers never seen in training.
    pub fn init_unseen_speakers(&mut self, n_trained: usize) -> Result<()> {
        let rows = self.config.n_speakers;
        if n_trained == 0 || n_trained > rows {
            return Err(Error::Config(format!("{n_trained} trained speakers for a table of {rows}")));
        }
        let dim = self.config.speaker_embedding_dim;
        let table = self.params.tensor_mut(self.arch.speaker_table);
        let mut mean = vec![0.0; dim];
        for r in 0..n_trained {
            for (m, v) in mean.iter_mut().zip(table.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n_trained as f64);
        for r in n_trained..rows {
            table.data_mut()[r * dim..(r + 1) * dim].copy_from_slice(&mean);
        }
        Ok(())
    }

    pub fn speaker(&self, g: &mut Graph, speaker_id: u32) -> Result<SpeakerContext> {
        if speaker_id as usize >= self.config.n_speakers {
            return Err(Error::UnknownSpeaker(speaker_id));
        }
        let table = g.param(self.arch.speaker_table);
        let embedding = g.tape.gather_rows(table, &[speaker_id as usize])?;
        Ok(SpeakerContext { speaker_id, embedding })
    }

    /// `[L×d]` phoneme hidden sequence.
    pub fn encode_phonemes(&self, g: &mut Graph, phonemes: &PhonemeSequence) -> Result<Var> {
        let eps = self.config.layer_norm_eps;
        if let Some(bad) = phonemes.ids().iter().find(|&&p| p as usize >= self.config.phoneme_vocab_size) {
            return Err(Error::Contract(format!("phoneme id {bad} outside the vocabulary")));
        }
        let table = g.param(self.arch.embedding);
        let index: Vec<usize> = phonemes.ids().iter().map(|&p| p as usize).collect();
        let x = g.tape.gather_rows(table, &index)?;
        let mut x = add_positions(g, x)?;
        for block in &self.arch.encoder {
            x = block.forward(g, x, None, eps)?;
        }
        self.arch.encoder_norm.forward(g, x, None, eps)
    }

    /// `[L]` predicted `ln(d + 1)`.
    pub fn predict_log_durations(&self, g: &mut Graph, phoneme_hidden: Var) -> Result<Var> {
        let y = self.arch.duration.forward(g, phoneme_hidden, self.config.layer_norm_eps)?;
        let n = g.tape.value(y).rows();
        g.tape.reshape(y, &[n])
    }

    /// `[T]` frame-level pitch regressed from a frame-level hidden sequence.
    pub fn predict_pitch(&self, g: &mut Graph, frame_hidden: Var) -> Result<Var> {
        let y = self.arch.pitch.forward(g, frame_hidden, self.config.layer_norm_eps)?;
        let n = g.tape.value(y).rows();
        g.tape.reshape(y, &[n])
    }

    /// Adds the linear pitch embedding to `hidden`.
    pub fn pitch_pathway(&self, g: &mut Graph, hidden: Var, pitch: Var) -> Result<Var> {
        let rows = g.tape.value(hidden).rows();
        if g.tape.value(pitch).numel() != rows {
            return Err(Error::Alignment(format!(
                "{} pitch values for {rows} frames",
                g.tape.value(pitch).numel()
            )));
        }
        let column = g.tape.reshape(pitch, &[rows, 1])?;
        let emb = self.arch.pitch_projection.forward(g, column)?;
        g.tape.add(hidden, emb)
    }

    /// Encodes `mel` with the acoustic extractor and mean-pools it over the
    /// whole utterance and over each phoneme's frame span.
    pub fn acoustic_condition(&self, g: &mut Graph, mel: Var, durations: &DurationSequence) -> Result<AcousticVectors> {
        let frames = g.tape.value(mel).rows();
        if durations.total() != frames {
            return Err(Error::Alignment(format!(
                "durations cover {} frames, mel has {frames}",
                durations.total()
            )));
        }
        let ex = &self.arch.acoustic_extractor;
        let h = ex.conv1.forward(g, mel)?;
        let h = g.tape.relu(h);
        let h = ex.norm.forward(g, h, None, self.config.layer_norm_eps)?;
        let h = ex.conv2.forward(g, h)?;
        let utterance = g.tape.mean_rows(h)?;
        let phonemes = g.tape.segment_mean(h, durations.frames())?;
        Ok(AcousticVectors { utterance, phonemes })
    }

    /// `[rows×acoustic_dim]` acoustic condition predicted from a hidden sequence.
    pub fn predict_acoustic(&self, g: &mut Graph, hidden: Var) -> Result<Var> {
        self.arch.acoustic_predictor.forward(g, hidden, self.config.layer_norm_eps)
    }

    /// Adds frame-level acoustic vectors to `hidden` through the dense layer.
    pub fn acoustic_pathway(&self, g: &mut Graph, hidden: Var, acoustic_frames: Var) -> Result<Var> {
        let emb = self.arch.acoustic_projection.forward(g, acoustic_frames)?;
        g.tape.add(hidden, emb)
    }

    /// Decoder stack on an assembled decoder input: positions, conditional-LN
    /// blocks, final conditional norm, and the mel projection.
    pub fn decode(&self, g: &mut Graph, decoder_input: Var, speaker: &SpeakerContext) -> Result<Var> {
        let eps = self.config.layer_norm_eps;
        let mut x = add_positions(g, decoder_input)?;
        for block in &self.arch.decoder {
            x = block.forward(g, x, Some(speaker), eps)?;
        }
        let x = self.arch.decoder_norm.forward(g, x, Some(speaker), eps)?;
        self.arch.mel_linear.forward(g, x)
    }

    /// Phoneme encoder → length regulator → pitch pathway → acoustic pathway →
    /// conditional-LN decoder → mel.
    pub fn tts_forward(&self, g: &mut Graph, inputs: TtsInputs) -> Result<TtsOutput> {
        let phoneme_hidden = self.encode_phonemes(g, inputs.phonemes).stage("phoneme encoder")?;
        let log_durations = self.predict_log_durations(g, phoneme_hidden).stage("duration predictor")?;
        let durations = match inputs.durations {
            DurationSource::Oracle(d) => {
                if d.len() != inputs.phonemes.len() {
                    return Err(Error::Alignment(format!(
                        "{} durations for {} phonemes",
                        d.len(),
                        inputs.phonemes.len()
                    ))
                    .in_stage("length regulator"));
                }
                d.clone()
            }
            DurationSource::Predicted => {
                let frames = round_log_durations(g.tape.value(log_durations).data(), self.config.max_duration);
                DurationSequence::new(frames)?
            }
        };
        let expanded_hidden = length_regulate(g, phoneme_hidden, &durations).stage("length regulator")?;

        let pitch_prediction = self.predict_pitch(g, expanded_hidden).stage("pitch predictor")?;
        let pitch = match inputs.pitch {
            PitchSource::Oracle(p) => {
                let t = Tensor::vector(p.to_vec()).stage("pitch pathway")?;
                g.tape.constant(t)
            }
            PitchSource::Predicted => pitch_prediction,
        };
        let x = self.pitch_pathway(g, expanded_hidden, pitch).stage("pitch pathway")?;

        let acoustic_prediction = self.predict_acoustic(g, phoneme_hidden).stage("acoustic predictor")?;
        let (acoustic, acoustic_target) = match inputs.acoustic {
            AcousticSource::Extracted(mel) => {
                let m = g.tape.constant(mel.clone());
                let v = self.acoustic_condition(g, m, &durations).stage("acoustic condition")?;
                let target = g.tape.detach(v.phonemes);
                (v.phonemes, Some(target))
            }
            AcousticSource::Predicted => (acoustic_prediction, None),
        };
        let acoustic_frames = g.tape.gather_rows(acoustic, &durations.expansion_index())?;
        let x = self.acoustic_pathway(g, x, acoustic_frames).stage("acoustic pathway")?;

        let speaker = self.speaker(g, inputs.speaker_id).stage("speaker")?;
        let mel = self.decode(g, x, &speaker).stage("decoder")?;
        Ok(TtsOutput {
            mel,
            log_durations,
            pitch_prediction,
            acoustic_prediction,
            acoustic_target,
            phoneme_hidden,
            expanded_hidden,
            durations,
        })
    }
}
