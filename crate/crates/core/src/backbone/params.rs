use std::collections::HashMap;
use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Disjoint partition of the model parameters, the unit of stage-wise freezing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParameterGroup {
    PhonemeEncoder,
    DurationPredictor,
    PitchPredictor,
    AcousticCondition,
    DecoderCore,
    ConditionalLN,
    MelLinear,
    SpeakerTable,
    MelEncoder,
}

impl ParameterGroup {
    pub const ALL: [ParameterGroup; 9] = [
        ParameterGroup::PhonemeEncoder,
        ParameterGroup::DurationPredictor,
        ParameterGroup::PitchPredictor,
        ParameterGroup::AcousticCondition,
        ParameterGroup::DecoderCore,
        ParameterGroup::ConditionalLN,
        ParameterGroup::MelLinear,
        ParameterGroup::SpeakerTable,
        ParameterGroup::MelEncoder,
    ];

    fn bit(self) -> u16 {
        1 << (self as u16)
    }

    pub fn name(self) -> &'static str {
        match self {
            ParameterGroup::PhonemeEncoder => "phoneme_encoder",
            ParameterGroup::DurationPredictor => "duration_predictor",
            ParameterGroup::PitchPredictor => "pitch_predictor",
            ParameterGroup::AcousticCondition => "acoustic_condition",
            ParameterGroup::DecoderCore => "decoder_core",
            ParameterGroup::ConditionalLN => "conditional_ln",
            ParameterGroup::MelLinear => "mel_linear",
            ParameterGroup::SpeakerTable => "speaker_table",
            ParameterGroup::MelEncoder => "mel_encoder",
        }
    }
}

impl fmt::Display for ParameterGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Set of parameter groups.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct GroupSet(u16);

impl GroupSet {
    pub const EMPTY: GroupSet = GroupSet(0);

    pub fn all() -> Self {
        ParameterGroup::ALL.into_iter().collect()
    }

    pub fn contains(self, g: ParameterGroup) -> bool {
        self.0 & g.bit() != 0
    }

    pub fn with(mut self, g: ParameterGroup) -> Self {
        self.0 |= g.bit();
        self
    }

    pub fn without(mut self, g: ParameterGroup) -> Self {
        self.0 &= !g.bit();
        self
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = ParameterGroup> {
        ParameterGroup::ALL.into_iter().filter(move |g| self.contains(*g))
    }
}

impl FromIterator<ParameterGroup> for GroupSet {
    fn from_iter<I: IntoIterator<Item = ParameterGroup>>(iter: I) -> Self {
        iter.into_iter().fold(GroupSet::EMPTY, GroupSet::with)
    }
}

impl fmt::Debug for GroupSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter()).finish()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParameterGroup,
    pub tensor: Tensor,
}

/// Named parameter tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn register(&mut self, name: impl Into<String>, group: ParameterGroup, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, group, tensor });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.id(name).map(|id| self.entry(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries_mut(&mut self) -> impl Iterator<Item = &mut ParamEntry> {
        self.entries.iter_mut()
    }

    /// Replaces the values of an existing parameter, keeping its shape.
    pub fn assign(&mut self, name: &str, data: Vec<f64>) -> Result<()> {
        let id = self.id(name).ok_or_else(|| Error::Contract(format!("no parameter named {name}")))?;
        let t = &mut self.entries[id.0].tensor;
        *t = Tensor::new(t.shape().to_vec(), data)?;
        Ok(())
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    pub fn group_numel(&self, group: ParameterGroup) -> usize {
        self.entries.iter().filter(|e| e.group == group).map(|e| e.tensor.numel()).sum()
    }
}

/// Registers parameters with deterministic initialization.
pub(crate) struct Builder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    /// Uniform Glorot initialization.
    pub fn glorot(&mut self, name: &str, group: ParameterGroup, shape: &[usize], fan_in: usize, fan_out: usize) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        let t = Tensor::new(shape.to_vec(), data).expect("valid parameter shape");
        self.store.register(name, group, t)
    }

    pub fn uniform(&mut self, name: &str, group: ParameterGroup, shape: &[usize], bound: f64) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        let t = Tensor::new(shape.to_vec(), data).expect("valid parameter shape");
        self.store.register(name, group, t)
    }

    pub fn constant(&mut self, name: &str, group: ParameterGroup, shape: &[usize], value: f64) -> ParamId {
        self.store.register(name, group, Tensor::full(shape, value))
    }
}
