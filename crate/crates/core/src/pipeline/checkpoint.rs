//! Versioned binary checkpoint.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "MELBCKPT" | u32 version | u8 stage tag
//! u32 len + UTF-8   effective configuration (TOML)
//! u32 count, then per parameter:
//!     u16 len + UTF-8 name | u8 ndim | u32 × ndim extents | f64 × numel
//! u8 has_adam, then if 1:
//!     u64 t | f64 beta1, beta2, epsilon, learning_rate | u32 slots,
//!     per slot: u16 len + UTF-8 name | u32 len | f64 × len m | f64 × len v
//! rng: 32-byte seed | u64 stream | u64 word position low | u64 high
//! ```

use std::path::Path;

use rand_chacha::ChaCha8Rng;

use super::Stage;
use crate::backbone::TtsModel;
use crate::binio::{malformed, Reader, Writer};
use crate::config::ExperimentConfig;
use crate::error::{FormatError, Result};
use crate::numerics::{AdamSlot, AdamState, Tensor};

const MAGIC: &[u8; 8] = b"MELBCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Position of a ChaCha stream, enough to resume it exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    /// Stage that produced the parameters.
    pub stage: Stage,
    pub model: TtsModel,
    pub adam: Option<AdamState>,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.u8(self.stage.tag());
        w.text(&self.config.to_toml());
        let entries = self.model.params().entries();
        w.u32(entries.len() as u32);
        for e in entries {
            w.name(&e.name);
            w.u8(e.tensor.shape().len() as u8);
            e.tensor.shape().iter().for_each(|d| w.u32(*d as u32));
            w.f64s(e.tensor.data());
        }
        match &self.adam {
            None => w.u8(0),
            Some(a) => {
                w.u8(1);
                w.u64(a.t);
                w.f64s(&[a.beta1, a.beta2, a.epsilon, a.learning_rate]);
                w.u32(a.slots.len() as u32);
                for s in &a.slots {
                    w.name(&s.name);
                    w.u32(s.m.len() as u32);
                    w.f64s(&s.m);
                    w.f64s(&s.v);
                }
            }
        }
        w.bytes(&self.rng.seed);
        w.u64(self.rng.stream);
        w.u64(self.rng.word_pos as u64);
        w.u64((self.rng.word_pos >> 64) as u64);
        w.buf
    }

    /// Parses a checkpoint. The stored parameter names must match the model
    /// registry of the stored configuration exactly.
    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = Reader::new(data);
        r.header(MAGIC, CHECKPOINT_VERSION)?;
        let tag = r.u8("stage")?;
        let stage = Stage::from_tag(tag).ok_or_else(|| FormatError::Malformed(format!("stage tag {tag}")))?;
        let config = ExperimentConfig::from_toml(&r.text("config")?)
            .map_err(|e| FormatError::Malformed(format!("stored configuration: {e}")))?;
        let mut model = TtsModel::new(config.model.clone(), 0)
            .map_err(|e| FormatError::Malformed(format!("stored configuration: {e}")))?;

        let count = r.u32("parameter count")? as usize;
        let mut seen = vec![false; model.params().len()];
        for _ in 0..count {
            let name = r.name("parameter name")?;
            let ndim = r.u8("rank")? as usize;
            let shape = (0..ndim).map(|_| r.u32("shape").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().product::<usize>();
            let values = r.f64s(numel, &name)?;
            let id = model.params().id(&name).ok_or_else(|| FormatError::UnknownParameter(name.clone()))?;
            if seen[id.0] {
                return Err(FormatError::Malformed(format!("parameter {name} stored twice")).into());
            }
            seen[id.0] = true;
            let slot = model.params_mut().tensor_mut(id);
            if slot.shape() != shape.as_slice() {
                return Err(FormatError::Malformed(format!("{name}: shape {shape:?}, expected {:?}", slot.shape())).into());
            }
            *slot = Tensor::new(shape, values).map_err(|_| malformed(&name))?;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(FormatError::MissingParameter(model.params().entries()[i].name.clone()).into());
        }

        let adam = match r.u8("optimizer flag")? {
            0 => None,
            1 => {
                let t = r.u64("optimizer step")?;
                let h = r.f64s(4, "optimizer hyperparameters")?;
                let n = r.u32("optimizer slots")? as usize;
                let mut slots = Vec::with_capacity(n.min(1 << 12));
                for _ in 0..n {
                    let name = r.name("optimizer slot")?;
                    let entry = model.params().get(&name).ok_or_else(|| FormatError::UnknownParameter(name.clone()))?;
                    let len = r.u32("slot length")? as usize;
                    if len != entry.tensor.numel() {
                        return Err(FormatError::Malformed(format!("optimizer slot {name} has {len} values")).into());
                    }
                    let m = r.f64s(len, &name)?;
                    let v = r.f64s(len, &name)?;
                    slots.push(AdamSlot { name, m, v });
                }
                Some(AdamState { beta1: h[0], beta2: h[1], epsilon: h[2], learning_rate: h[3], t, slots })
            }
            _ => return Err(malformed("optimizer flag").into()),
        };
        let seed: [u8; 32] = r.take(32, "rng seed")?.try_into().expect("32 bytes");
        let stream = r.u64("rng stream")?;
        let lo = r.u64("rng position")? as u128;
        let hi = r.u64("rng position")? as u128;
        r.finish()?;
        Ok(Checkpoint { config, stage, model, adam, rng: RngState { seed, stream, word_pos: lo | (hi << 64) } })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let data = std::fs::read(path)?;
        Self::from_bytes(&data)
    }

    /// Names of parameters whose bits differ from `other`'s.
    pub fn changed_parameters(&self, other: &Checkpoint) -> Result<Vec<String>> {
        super::train::changed_parameters(self.model.params(), other.model.params())
    }
}
