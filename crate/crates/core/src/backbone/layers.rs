//! Parameterized building blocks. Each layer holds parameter ids and runs on a
//! [`Graph`].

use super::graph::Graph;
use super::params::{Builder, ParamId, ParameterGroup};
use super::types::SpeakerContext;
use crate::error::{Error, Result};
use crate::numerics::{Tensor, Var};

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub(crate) fn new(b: &mut Builder, name: &str, group: ParameterGroup, d_in: usize, d_out: usize) -> Self {
        let weight = b.glorot(&format!("{name}.weight"), group, &[d_in, d_out], d_in, d_out);
        let bias = b.constant(&format!("{name}.bias"), group, &[d_out], 0.0);
        Linear { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        let y = g.tape.matmul(x, w)?;
        g.tape.add_row(y, b)
    }
}

/// Same-padded convolution over time with bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub kernel: ParamId,
    pub bias: ParamId,
}

impl Conv {
    pub(crate) fn new(b: &mut Builder, name: &str, group: ParameterGroup, k: usize, d_in: usize, d_out: usize) -> Self {
        let kernel = b.glorot(&format!("{name}.kernel"), group, &[k, d_in, d_out], k * d_in, d_out);
        let bias = b.constant(&format!("{name}.bias"), group, &[d_out], 0.0);
        Conv { kernel, bias }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (k, b) = (g.param(self.kernel), g.param(self.bias));
        let y = g.tape.conv1d(x, k)?;
        g.tape.add_row(y, b)
    }
}

/// Layer normalization, either with learned affine parameters or with scale
/// and shift generated from a speaker embedding by two linear maps.
#[derive(Clone, Debug)]
pub enum Norm {
    Plain { gamma: ParamId, beta: ParamId },
    Conditional { scale: Linear, shift: Linear },
}

impl Norm {
    pub(crate) fn plain(b: &mut Builder, name: &str, group: ParameterGroup, d: usize) -> Self {
        Norm::Plain {
            gamma: b.constant(&format!("{name}.gamma"), group, &[d], 1.0),
            beta: b.constant(&format!("{name}.beta"), group, &[d], 0.0),
        }
    }

    /// Conditional norm; the scale map starts near the identity (bias 1).
    pub(crate) fn conditional(b: &mut Builder, name: &str, spk_dim: usize, d: usize) -> Self {
        let group = ParameterGroup::ConditionalLN;
        let init = 0.1 / (spk_dim as f64).sqrt();
        let scale = Linear {
            weight: b.uniform(&format!("{name}.scale.weight"), group, &[spk_dim, d], init),
            bias: b.constant(&format!("{name}.scale.bias"), group, &[d], 1.0),
        };
        let shift = Linear {
            weight: b.uniform(&format!("{name}.shift.weight"), group, &[spk_dim, d], init),
            bias: b.constant(&format!("{name}.shift.bias"), group, &[d], 0.0),
        };
        Norm::Conditional { scale, shift }
    }

    pub fn is_conditional(&self) -> bool {
        matches!(self, Norm::Conditional { .. })
    }

    pub fn forward(&self, g: &mut Graph, x: Var, speaker: Option<&SpeakerContext>, eps: f64) -> Result<Var> {
        match (self, speaker) {
            (Norm::Plain { gamma, beta }, None) => {
                let (gm, bt) = (g.param(*gamma), g.param(*beta));
                g.tape.layer_norm(x, gm, bt, eps)
            }
            (Norm::Conditional { scale, shift }, Some(spk)) => conditional_layer_norm(g, x, spk, scale, shift, eps),
            (Norm::Plain { .. }, Some(spk)) => Err(Error::Contract(format!(
                "speaker {} supplied to a block without conditional layer norm",
                spk.speaker_id
            ))),
            (Norm::Conditional { .. }, None) => {
                Err(Error::Contract("conditional layer norm requires a speaker".into()))
            }
        }
    }
}

/// `normalize(x) ⊙ scale(e) + shift(e)`, broadcast over time.
pub fn conditional_layer_norm(
    g: &mut Graph,
    x: Var,
    speaker: &SpeakerContext,
    scale: &Linear,
    shift: &Linear,
    eps: f64,
) -> Result<Var> {
    let n = g.tape.normalize(x, eps)?;
    let s = scale.forward(g, speaker.embedding)?;
    let b = shift.forward(g, speaker.embedding)?;
    let y = g.tape.mul_row(n, s)?;
    g.tape.add_row(y, b)
}

/// Multi-head scaled dot-product self-attention.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub n_heads: usize,
}

impl SelfAttention {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let q = self.query.forward(g, x)?;
        let k = self.key.forward(g, x)?;
        let v = self.value.forward(g, x)?;
        let d = g.tape.value(q).cols();
        let dh = d / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = g.tape.slice_cols(q, lo, hi)?;
            let kh = g.tape.slice_cols(k, lo, hi)?;
            let vh = g.tape.slice_cols(v, lo, hi)?;
            let kt = g.tape.transpose(kh)?;
            let scores = g.tape.matmul(qh, kt)?;
            let scores = g.tape.scale(scores, scale);
            let weights = g.tape.softmax(scores, 1)?;
            heads.push(g.tape.matmul(weights, vh)?);
        }
        let joined = if heads.len() == 1 { heads[0] } else { g.tape.concat_cols(&heads)? };
        self.output.forward(g, joined)
    }
}

/// Convolutional position-wise feed-forward network: kernel-k conv, ReLU,
/// pointwise conv.
#[derive(Clone, Debug)]
pub struct ConvFeedForward {
    pub expand: Conv,
    pub project: Conv,
}

impl ConvFeedForward {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.expand.forward(g, x)?;
        let h = g.tape.relu(h);
        self.project.forward(g, h)
    }
}

/// Feed-forward Transformer block with pre-normalized residual sublayers.
#[derive(Clone, Debug)]
pub struct FftBlock {
    pub attn_norm: Norm,
    pub attention: SelfAttention,
    pub ffn_norm: Norm,
    pub ffn: ConvFeedForward,
}

pub(crate) struct FftBlockSpec {
    pub hidden: usize,
    pub heads: usize,
    pub filter: usize,
    pub kernel: usize,
    /// Speaker embedding width when the block uses conditional norms.
    pub conditional: Option<usize>,
}

impl FftBlock {
    /// Registers a block. Attention and feed-forward weights go to `group`;
    /// conditional norms always belong to [`ParameterGroup::ConditionalLN`].
    pub(crate) fn new(b: &mut Builder, name: &str, group: ParameterGroup, spec: &FftBlockSpec) -> Self {
        let d = spec.hidden;
        let norm = |b: &mut Builder, n: &str| match spec.conditional {
            Some(spk) => Norm::conditional(b, &format!("{name}.{n}"), spk, d),
            None => Norm::plain(b, &format!("{name}.{n}"), group, d),
        };
        let attn_norm = norm(b, "attn_norm");
        let attention = SelfAttention {
            query: Linear::new(b, &format!("{name}.attn.query"), group, d, d),
            key: Linear::new(b, &format!("{name}.attn.key"), group, d, d),
            value: Linear::new(b, &format!("{name}.attn.value"), group, d, d),
            output: Linear::new(b, &format!("{name}.attn.output"), group, d, d),
            n_heads: spec.heads,
        };
        let ffn_norm = norm(b, "ffn_norm");
        let ffn = ConvFeedForward {
            expand: Conv::new(b, &format!("{name}.ffn.expand"), group, spec.kernel, d, spec.filter),
            project: Conv::new(b, &format!("{name}.ffn.project"), group, 1, spec.filter, d),
        };
        FftBlock { attn_norm, attention, ffn_norm, ffn }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, speaker: Option<&SpeakerContext>, eps: f64) -> Result<Var> {
        let h = self.attn_norm.forward(g, x, speaker, eps)?;
        let a = self.attention.forward(g, h)?;
        let a = g.dropout(a)?;
        let x = g.tape.add(x, a)?;
        let h = self.ffn_norm.forward(g, x, speaker, eps)?;
        let f = self.ffn.forward(g, h)?;
        let f = g.dropout(f)?;
        g.tape.add(x, f)
    }
}

/// Two conv + ReLU + layer-norm stages followed by a linear read-out; used for
/// duration, pitch and acoustic-condition prediction.
#[derive(Clone, Debug)]
pub struct VariancePredictor {
    pub conv1: Conv,
    pub norm1: Norm,
    pub conv2: Conv,
    pub norm2: Norm,
    pub readout: Linear,
}

impl VariancePredictor {
    pub(crate) fn new(
        b: &mut Builder,
        name: &str,
        group: ParameterGroup,
        (d_in, filter, kernel, d_out): (usize, usize, usize, usize),
    ) -> Self {
        VariancePredictor {
            conv1: Conv::new(b, &format!("{name}.conv1"), group, kernel, d_in, filter),
            norm1: Norm::plain(b, &format!("{name}.norm1"), group, filter),
            conv2: Conv::new(b, &format!("{name}.conv2"), group, kernel, filter, filter),
            norm2: Norm::plain(b, &format!("{name}.norm2"), group, filter),
            readout: Linear::new(b, &format!("{name}.readout"), group, filter, d_out),
        }
    }

    /// `[rows×d_in] → [rows×d_out]`
    pub fn forward(&self, g: &mut Graph, x: Var, eps: f64) -> Result<Var> {
        let h = self.conv1.forward(g, x)?;
        let h = g.tape.relu(h);
        let h = self.norm1.forward(g, h, None, eps)?;
        let h = g.dropout(h)?;
        let h = self.conv2.forward(g, h)?;
        let h = g.tape.relu(h);
        let h = self.norm2.forward(g, h, None, eps)?;
        let h = g.dropout(h)?;
        self.readout.forward(g, h)
    }
}

/// Sinusoidal position table `[len×d]`.
pub fn positional_encoding(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for t in 0..len {
        for i in 0..d {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = t as f64 / rate;
            data[t * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::matrix(len, d, data).expect("positive extents")
}

/// Adds the sinusoidal position table to `x`.
pub fn add_positions(g: &mut Graph, x: Var) -> Result<Var> {
    let (rows, cols) = (g.tape.value(x).rows(), g.tape.value(x).cols());
    let pe = g.tape.constant(positional_encoding(rows, cols));
    g.tape.add(x, pe)
}
