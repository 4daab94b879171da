use crate::error::{Error, Result};
use crate::numerics::Var;

/// Non-empty phoneme id sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PhonemeSequence(Vec<u32>);

impl PhonemeSequence {
    pub fn new(ids: Vec<u32>, vocab: usize) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Contract("phoneme sequence is empty".into()));
        }
        if let Some(bad) = ids.iter().find(|&&id| id as usize >= vocab) {
            return Err(Error::Contract(format!("phoneme id {bad} outside vocabulary of {vocab}")));
        }
        Ok(PhonemeSequence(ids))
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Per-phoneme frame counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DurationSequence(Vec<usize>);

impl DurationSequence {
    pub fn new(frames: Vec<usize>) -> Result<Self> {
        if frames.iter().sum::<usize>() == 0 {
            return Err(Error::EmptyOutput);
        }
        Ok(DurationSequence(frames))
    }

    /// Checks that the sequence pairs with `phonemes`.
    pub fn paired(frames: Vec<usize>, phonemes: &PhonemeSequence) -> Result<Self> {
        if frames.len() != phonemes.len() {
            return Err(Error::Alignment(format!(
                "{} durations for {} phonemes",
                frames.len(),
                phonemes.len()
            )));
        }
        Self::new(frames)
    }

    pub fn frames(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }

    /// Row index that repeats phoneme `i` `frames[i]` times.
    pub fn expansion_index(&self) -> Vec<usize> {
        self.0.iter().enumerate().flat_map(|(i, &d)| std::iter::repeat_n(i, d)).collect()
    }
}

/// A speaker id bound to its embedding row on the current tape.
#[derive(Clone, Copy, Debug)]
pub struct SpeakerContext {
    pub speaker_id: u32,
    /// `[1×speaker_embedding_dim]`
    pub embedding: Var,
}
