use std::path::Path;

use super::{OracleConfig, OracleSpec, Utterance};
use crate::binio::{malformed, Reader, Writer};
use crate::error::{Error, FormatError, Result};
use crate::numerics::Tensor;

pub(crate) const CORPUS_MAGIC: &[u8; 8] = b"MELBCRPS";
const CORPUS_VERSION: u32 = 1;

/// Generated utterances together with the configuration that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: OracleConfig,
    pub utterances: Vec<Utterance>,
}

/// Which part of a speaker's utterances to select.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    /// The leading utterances: training data for source speakers, the
    /// adaptation pool for adaptation speakers.
    Train,
    /// The trailing `holdout_fraction` of each speaker's utterances.
    Heldout,
    All,
}

/// `utts_per_speaker` utterances for each of speakers `0..n_speakers`.
pub fn gen_corpus(spec: &OracleSpec, n_speakers: usize, utts_per_speaker: usize) -> Result<Corpus> {
    if n_speakers == 0 {
        return Err(Error::Config("corpus needs at least one speaker".into()));
    }
    if n_speakers > spec.speakers.len() {
        return Err(Error::Config(format!("oracle defines {} speakers, {n_speakers} requested", spec.speakers.len())));
    }
    let mut utterances = Vec::with_capacity(n_speakers * utts_per_speaker);
    for s in 0..n_speakers as u32 {
        for u in 0..utts_per_speaker as u32 {
            utterances.push(spec.generate(s, u)?);
        }
    }
    Ok(Corpus { config: spec.config.clone(), utterances })
}

impl Corpus {
    /// Full layout described by `config`: source speakers first, then the
    /// adaptation speakers with their own utterance count.
    pub fn generate(config: &OracleConfig) -> Result<Self> {
        let spec = OracleSpec::new(config)?;
        let mut utterances = Vec::new();
        for s in 0..config.n_speakers() as u32 {
            for u in 0..config.utterances_for(s) as u32 {
                utterances.push(spec.generate(s, u)?);
            }
        }
        Ok(Corpus { config: config.clone(), utterances })
    }

    pub fn spec(&self) -> Result<OracleSpec> {
        OracleSpec::new(&self.config)
    }

    pub fn speaker_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.utterances.iter().map(|u| u.speaker_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Utterances of one speaker in utterance-id order, restricted to `split`.
    pub fn speaker(&self, speaker_id: u32, split: Split) -> Vec<&Utterance> {
        let mut all: Vec<&Utterance> = self.utterances.iter().filter(|u| u.speaker_id == speaker_id).collect();
        all.sort_by_key(|u| u.utterance_id);
        let held = (all.len() as f64 * self.config.holdout_fraction).round() as usize;
        let cut = all.len() - held;
        match split {
            Split::Train => all.truncate(cut),
            Split::Heldout => {
                all.drain(..cut);
            }
            Split::All => {}
        }
        all
    }

    /// `split` of every source speaker.
    pub fn source(&self, split: Split) -> Vec<&Utterance> {
        (0..self.config.n_source_speakers as u32).flat_map(|s| self.speaker(s, split)).collect()
    }

    pub fn ensure_mel_dim(&self, mel_dim: usize) -> Result<()> {
        if self.config.mel_dim != mel_dim {
            return Err(Error::Config(format!(
                "corpus was generated with mel_dim {}, model expects {mel_dim}",
                self.config.mel_dim
            )));
        }
        Ok(())
    }

    /// Serializes to the versioned binary layout.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::default();
        w.bytes(CORPUS_MAGIC);
        w.u32(CORPUS_VERSION);
        w.text(&toml::to_string(&self.config).map_err(|e| Error::Config(e.to_string()))?);
        w.u32(self.utterances.len() as u32);
        for u in &self.utterances {
            w.u32(u.utterance_id);
            w.u32(u.speaker_id);
            w.u8(u.transcript_present as u8);
            w.u32(u.phonemes.len() as u32);
            u.phonemes.iter().for_each(|p| w.u32(*p));
            u.durations.iter().for_each(|d| w.u32(*d as u32));
            w.u32(u.pitch.len() as u32);
            w.f64s(&u.pitch);
            w.f64s(u.mel.data());
        }
        Ok(w.buf)
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = Reader::new(data);
        r.header(CORPUS_MAGIC, CORPUS_VERSION)?;
        let config: OracleConfig =
            toml::from_str(&r.text("config")?).map_err(|e| FormatError::Malformed(format!("corpus config: {e}")))?;
        let m = config.mel_dim;
        let n = r.u32("utterance count")? as usize;
        let mut utterances = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let utterance_id = r.u32("utterance id")?;
            let speaker_id = r.u32("speaker id")?;
            let transcript_present = match r.u8("transcript flag")? {
                0 => false,
                1 => true,
                _ => return Err(malformed("transcript flag").into()),
            };
            let l = r.u32("phoneme count")? as usize;
            let phonemes = (0..l).map(|_| r.u32("phonemes")).collect::<Result<Vec<_>>>()?;
            let durations = (0..l).map(|_| r.u32("durations").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let t = r.u32("frame count")? as usize;
            if t != durations.iter().sum::<usize>() || t == 0 {
                return Err(FormatError::Malformed(format!("utterance {utterance_id}: frames disagree with durations")).into());
            }
            let pitch = r.f64s(t, "pitch")?;
            let mel = Tensor::matrix(t, m, r.f64s(t * m, "mel")?).map_err(|_| malformed("mel"))?;
            utterances.push(Utterance { utterance_id, speaker_id, phonemes, durations, pitch, mel, transcript_present });
        }
        r.finish()?;
        Ok(Corpus { config, utterances })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
