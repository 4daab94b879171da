//! Objective metrics against the synthetic oracle: mel distances, a
//! speaker-proximity score and paired arm comparisons.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::synthdata::OracleSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DistanceMode {
    Mae,
    Mse,
}

/// How to treat mels of different length.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LengthPolicy {
    /// Lengths must agree.
    Exact,
    /// Compare the overlapping leading frames.
    Truncate,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MelDistance {
    pub value: f64,
    /// Frames compared.
    pub frames: usize,
    /// Share of the longer input's frames left out of the comparison.
    pub truncated_fraction: f64,
}

pub fn mel_distance(a: &Tensor, b: &Tensor, mode: DistanceMode, policy: LengthPolicy) -> Result<MelDistance> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.cols() {
        return Err(Error::Shape { op: "mel_distance", detail: format!("{:?} vs {:?}", a.shape(), b.shape()) });
    }
    let (ta, tb) = (a.rows(), b.rows());
    if policy == LengthPolicy::Exact && ta != tb {
        return Err(Error::Alignment(format!("mel lengths differ: {ta} vs {tb}")));
    }
    let frames = ta.min(tb);
    let n = frames * a.cols();
    if n == 0 {
        return Err(Error::EmptyOutput);
    }
    let pairs = a.data()[..n].iter().zip(&b.data()[..n]);
    let sum: f64 = match mode {
        DistanceMode::Mae => pairs.map(|(x, y)| (x - y).abs()).sum(),
        DistanceMode::Mse => pairs.map(|(x, y)| (x - y) * (x - y)).sum(),
    };
    Ok(MelDistance { value: sum / n as f64, frames, truncated_fraction: 1.0 - frames as f64 / ta.max(tb) as f64 })
}

/// Per-speaker mel statistics of an oracle, used to score speaker proximity.
#[derive(Clone, Debug)]
pub struct SpeakerStatistics {
    stats: Vec<Vec<f64>>,
    spread: f64,
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

impl SpeakerStatistics {
    pub fn new(oracle: &OracleSpec) -> Result<Self> {
        let stats = (0..oracle.speakers.len() as u32).map(|s| oracle.speaker_statistic(s)).collect::<Result<Vec<_>>>()?;
        let mut total = 0.0;
        let mut pairs = 0usize;
        for i in 0..stats.len() {
            for j in i + 1..stats.len() {
                total += euclid(&stats[i], &stats[j]);
                pairs += 1;
            }
        }
        let spread = if pairs == 0 { 1.0 } else { total / pairs as f64 };
        Ok(SpeakerStatistics { stats, spread })
    }

    /// Mean distance between two speakers' statistics.
    pub fn spread(&self) -> f64 {
        self.spread
    }

    pub fn statistic(&self, speaker_id: u32) -> Result<&[f64]> {
        self.stats.get(speaker_id as usize).map(Vec::as_slice).ok_or(Error::UnknownSpeaker(speaker_id))
    }

    /// Distance from the per-dimension mean of `mel` to the speaker's
    /// statistic, in units of the inter-speaker spread. Lower is closer.
    pub fn proximity(&self, mel: &Tensor, speaker_id: u32) -> Result<f64> {
        let target = self.statistic(speaker_id)?;
        if mel.shape().len() != 2 || mel.cols() != target.len() {
            return Err(Error::Shape { op: "speaker_proximity", detail: format!("mel shape {:?}", mel.shape()) });
        }
        let mut mean = vec![0.0; target.len()];
        for t in 0..mel.rows() {
            mean.iter_mut().zip(mel.row(t)).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= mel.rows() as f64);
        Ok(euclid(&mean, target) / self.spread)
    }
}

/// One-off proximity score; build a [`SpeakerStatistics`] to score many mels.
pub fn speaker_proximity(generated: &Tensor, target_speaker: u32, oracle: &OracleSpec) -> Result<f64> {
    SpeakerStatistics::new(oracle)?.proximity(generated, target_speaker)
}

/// Per-utterance values of one metric for one experiment arm. Lower is better.
#[derive(Clone, Debug, PartialEq)]
pub struct ArmMetrics {
    pub arm: String,
    pub seed: u64,
    pub metric: String,
    pub values: BTreeMap<String, f64>,
}

impl ArmMetrics {
    pub fn new(arm: impl Into<String>, seed: u64, metric: impl Into<String>) -> Self {
        ArmMetrics { arm: arm.into(), seed, metric: metric.into(), values: BTreeMap::new() }
    }

    pub fn mean(&self) -> f64 {
        self.values.values().sum::<f64>() / self.values.len() as f64
    }

    /// Rows of `utterance_id,arm,metric,value`, without header.
    pub fn csv_rows(&self) -> String {
        let mut s = String::new();
        for (u, v) in &self.values {
            let _ = writeln!(s, "{u},{},{},{v:?}", self.arm, self.metric);
        }
        s
    }
}

pub const ARM_CSV_HEADER: &str = "utterance_id,arm,metric,value";

#[derive(Clone, Debug, PartialEq)]
pub struct PairedReport {
    pub arm_a: String,
    pub arm_b: String,
    pub metric: String,
    /// `a − b` per utterance; negative means `a` is better.
    pub deltas: BTreeMap<String, f64>,
    pub mean_a: f64,
    pub mean_b: f64,
    pub mean_delta: f64,
    /// Share of utterances where `a` is lower than `b`, ties counting half.
    pub a_wins: f64,
}

/// Compares two arms utterance by utterance.
pub fn paired_report(a: &ArmMetrics, b: &ArmMetrics) -> Result<PairedReport> {
    if a.metric != b.metric {
        return Err(Error::Config(format!("cannot pair metric {} with {}", a.metric, b.metric)));
    }
    if a.seed != b.seed {
        return Err(Error::Config(format!("paired arms use different seeds ({} vs {})", a.seed, b.seed)));
    }
    if a.values.is_empty() || !a.values.keys().eq(b.values.keys()) {
        return Err(Error::Config(format!("arms {} and {} cover different utterances", a.arm, b.arm)));
    }
    let deltas: BTreeMap<String, f64> = a.values.iter().map(|(k, va)| (k.clone(), va - b.values[k])).collect();
    let n = deltas.len() as f64;
    let wins: f64 = deltas.values().map(|d| if *d < 0.0 { 1.0 } else if *d == 0.0 { 0.5 } else { 0.0 }).sum();
    Ok(PairedReport {
        arm_a: a.arm.clone(),
        arm_b: b.arm.clone(),
        metric: a.metric.clone(),
        mean_delta: deltas.values().sum::<f64>() / n,
        deltas,
        mean_a: a.mean(),
        mean_b: b.mean(),
        a_wins: wins / n,
    })
}

impl PairedReport {
    /// Rows of `utterance_id,arm,metric,value` with the per-utterance delta
    /// under the arm label `a-b`.
    pub fn csv_rows(&self) -> String {
        let mut s = String::new();
        for (u, d) in &self.deltas {
            let _ = writeln!(s, "{u},{}-{},{}_delta,{d:?}", self.arm_a, self.arm_b, self.metric);
        }
        s
    }

    pub fn summary(&self) -> String {
        format!(
            "{} vs {} on {}: mean {:.6} vs {:.6}, delta {:+.6}, {} wins {:.3} of {} utterances",
            self.arm_a,
            self.arm_b,
            self.metric,
            self.mean_a,
            self.mean_b,
            self.mean_delta,
            self.arm_a,
            self.a_wins,
            self.deltas.len()
        )
    }
}
