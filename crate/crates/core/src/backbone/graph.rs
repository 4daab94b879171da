use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{GroupSet, ParamId, ParamStore};
use crate::error::Result;
use crate::numerics::{Tape, Var};

/// One forward pass: a tape plus lazily bound parameter leaves. Parameters in
/// `trainable` groups are recorded with `requires_grad`; all others are
/// constants, so no gradient work is spent on them.
pub struct Graph<'m> {
    pub tape: Tape,
    store: &'m ParamStore,
    bound: Vec<Option<Var>>,
    trainable: GroupSet,
    dropout: f64,
    rng: ChaCha8Rng,
}

impl<'m> Graph<'m> {
    pub fn new(store: &'m ParamStore, trainable: GroupSet) -> Self {
        Graph {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            trainable,
            dropout: 0.0,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// Graph with every parameter frozen.
    pub fn inference(store: &'m ParamStore) -> Self {
        Self::new(store, GroupSet::EMPTY)
    }

    /// Enables dropout with a deterministic mask stream.
    pub fn with_dropout(mut self, rate: f64, seed: u64) -> Self {
        self.dropout = rate;
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self
    }

    pub fn trainable(&self) -> GroupSet {
        self.trainable
    }

    pub fn store(&self) -> &'m ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let entry = self.store.entry(id);
        let mut t = entry.tensor.clone();
        t.set_requires_grad(self.trainable.contains(entry.group));
        let v = self.tape.leaf(t);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        if self.dropout == 0.0 {
            return Ok(x);
        }
        self.tape.dropout(x, self.dropout, &mut self.rng)
    }

    /// Gradients of bound trainable parameters after `tape.backward`.
    pub fn param_grads(&self) -> Vec<(ParamId, &[f64])> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.and_then(|v| self.tape.grad(v)).map(|g| (ParamId(i), g)))
            .collect()
    }
}
