use std::cell::RefCell;
use std::collections::BTreeSet;
use std::path::Path;

use super::corpus::{Corpus, CORPUS_MAGIC, Split};
use crate::binio::{malformed, peek_magic, Reader, Writer};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const MELSET_MAGIC: &[u8; 8] = b"MELBMELS";
const MELSET_VERSION: u32 = 1;

/// An untranscribed utterance. The type has no phoneme, duration or pitch
/// field; a transcript cannot travel through it.
#[derive(Clone, Debug, PartialEq)]
pub struct MelOnlyRecord {
    utterance_id: u32,
    speaker_id: u32,
    mel: Tensor,
}

impl MelOnlyRecord {
    /// Every field the record type carries.
    pub const FIELDS: [&'static str; 3] = ["utterance_id", "speaker_id", "mel"];
}

/// Mel-only utterances of one speaker. Field reads go through accessors that
/// log the field name, so a run can prove which fields it consumed.
#[derive(Debug)]
pub struct AdaptationSet {
    speaker_id: u32,
    mel_dim: usize,
    records: Vec<MelOnlyRecord>,
    audit: RefCell<BTreeSet<&'static str>>,
}

impl Clone for AdaptationSet {
    fn clone(&self) -> Self {
        AdaptationSet {
            speaker_id: self.speaker_id,
            mel_dim: self.mel_dim,
            records: self.records.clone(),
            audit: RefCell::default(),
        }
    }
}

impl PartialEq for AdaptationSet {
    fn eq(&self, other: &Self) -> bool {
        (self.speaker_id, self.mel_dim, &self.records) == (other.speaker_id, other.mel_dim, &other.records)
    }
}

impl Corpus {
    /// Drops transcripts from every utterance of `speaker_id` in `split`.
    pub fn strip_transcripts(&self, speaker_id: u32, split: Split) -> Result<AdaptationSet> {
        let utts = self.speaker(speaker_id, split);
        if utts.is_empty() {
            return Err(Error::UnknownSpeaker(speaker_id));
        }
        let records = utts
            .into_iter()
            .map(|u| MelOnlyRecord { utterance_id: u.utterance_id, speaker_id, mel: u.mel.clone() })
            .collect();
        AdaptationSet::new(speaker_id, self.config.mel_dim, records)
    }
}

impl AdaptationSet {
    fn new(speaker_id: u32, mel_dim: usize, records: Vec<MelOnlyRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Contract("adaptation set is empty".into()));
        }
        if let Some(r) = records.iter().find(|r| r.speaker_id != speaker_id || r.mel.cols() != mel_dim) {
            return Err(Error::Contract(format!("record {} does not belong to this set", r.utterance_id)));
        }
        Ok(AdaptationSet { speaker_id, mel_dim, records, audit: RefCell::default() })
    }

    fn log(&self, field: &'static str) {
        self.audit.borrow_mut().insert(field);
    }

    pub fn speaker_id(&self) -> u32 {
        self.log("speaker_id");
        self.speaker_id
    }

    pub fn mel_dim(&self) -> usize {
        self.mel_dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn mel(&self, i: usize) -> &Tensor {
        self.log("mel");
        &self.records[i].mel
    }

    pub fn utterance_ids(&self) -> Vec<u32> {
        self.log("utterance_id");
        self.records.iter().map(|r| r.utterance_id).collect()
    }

    /// Field names read since construction, sorted.
    pub fn consumed_fields(&self) -> Vec<&'static str> {
        self.audit.borrow().iter().copied().collect()
    }

    /// The first `n` records.
    pub fn first(&self, n: usize) -> Result<AdaptationSet> {
        if n == 0 || n > self.len() {
            return Err(Error::Config(format!("requested {n} adaptation utterances, {} available", self.len())));
        }
        AdaptationSet::new(self.speaker_id, self.mel_dim, self.records[..n].to_vec())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(MELSET_MAGIC);
        w.u32(MELSET_VERSION);
        w.u32(self.speaker_id);
        w.u32(self.mel_dim as u32);
        w.u32(self.records.len() as u32);
        for r in &self.records {
            w.u32(r.utterance_id);
            w.u32(r.mel.rows() as u32);
            w.f64s(r.mel.data());
        }
        w.buf
    }

    /// Parses a mel-only set. A transcript-bearing corpus file is rejected
    /// with [`Error::TranscriptPresent`].
    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        if peek_magic(data).as_ref() == Some(CORPUS_MAGIC) {
            return Err(Error::TranscriptPresent(
                "input is a transcript-bearing corpus; adaptation accepts mel-only sets".into(),
            ));
        }
        let mut r = Reader::new(data);
        r.header(MELSET_MAGIC, MELSET_VERSION)?;
        let speaker_id = r.u32("speaker id")?;
        let mel_dim = r.u32("mel dim")? as usize;
        let n = r.u32("record count")? as usize;
        let mut records = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let utterance_id = r.u32("utterance id")?;
            let t = r.u32("frame count")? as usize;
            let mel = Tensor::matrix(t, mel_dim, r.f64s(t * mel_dim, "mel")?).map_err(|_| malformed("mel"))?;
            records.push(MelOnlyRecord { utterance_id, speaker_id, mel });
        }
        r.finish()?;
        AdaptationSet::new(speaker_id, mel_dim, records).map_err(|_| malformed("adaptation set").into())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
