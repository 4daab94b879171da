//! Deterministic multi-speaker synthetic speech oracle.
//!
//! Every utterance is a pure function of `(config, speaker_id, utterance_id)`.
//! A mel frame is a per-speaker linear map applied to a smooth per-phoneme
//! template (blended toward the next phoneme across the span), plus a
//! per-speaker spectral profile, a pitch-driven component and optional
//! gaussian noise. Speakers differ in their map, profile, speaking rate and
//! pitch offset, so speaker identity is recoverable from mel statistics alone.

mod adaptation;
mod corpus;

pub use adaptation::{AdaptationSet, MelOnlyRecord};
pub use corpus::{gen_corpus, Corpus, Split};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Corpus generation settings. `Default` is the reference layout: eight
/// source speakers with 60 utterances each, two held-out adaptation speakers
/// with 125 each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    pub seed: u64,
    pub phoneme_vocab_size: usize,
    pub mel_dim: usize,
    pub noise_sigma: f64,
    pub n_source_speakers: usize,
    pub utterances_per_source_speaker: usize,
    pub n_adaptation_speakers: usize,
    pub utterances_per_adaptation_speaker: usize,
    pub min_phonemes: usize,
    pub max_phonemes: usize,
    /// Base durations are drawn from `1..=max_base_duration` frames.
    pub max_base_duration: usize,
    /// Fraction of each speaker's utterances (the last ones) held out.
    pub holdout_fraction: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            seed: 7,
            phoneme_vocab_size: 24,
            mel_dim: 16,
            noise_sigma: 0.01,
            n_source_speakers: 8,
            utterances_per_source_speaker: 60,
            n_adaptation_speakers: 2,
            utterances_per_adaptation_speaker: 125,
            min_phonemes: 5,
            max_phonemes: 20,
            max_base_duration: 4,
            holdout_fraction: 0.2,
        }
    }
}

impl OracleConfig {
    pub fn n_speakers(&self) -> usize {
        self.n_source_speakers + self.n_adaptation_speakers
    }

    pub fn is_source_speaker(&self, speaker_id: u32) -> bool {
        (speaker_id as usize) < self.n_source_speakers
    }

    pub fn adaptation_speakers(&self) -> impl Iterator<Item = u32> {
        (self.n_source_speakers..self.n_speakers()).map(|s| s as u32)
    }

    pub fn utterances_for(&self, speaker_id: u32) -> usize {
        if self.is_source_speaker(speaker_id) {
            self.utterances_per_source_speaker
        } else {
            self.utterances_per_adaptation_speaker
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("phoneme_vocab_size", self.phoneme_vocab_size),
            ("mel_dim", self.mel_dim),
            ("n_source_speakers", self.n_source_speakers),
            ("utterances_per_source_speaker", self.utterances_per_source_speaker),
            ("min_phonemes", self.min_phonemes),
            ("max_base_duration", self.max_base_duration),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("data.{name} must be positive")));
        }
        if self.max_phonemes < self.min_phonemes {
            return Err(Error::Config("data.max_phonemes is below data.min_phonemes".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("data.noise_sigma must be finite and non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config("data.holdout_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Fixed per-speaker transform.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerTransform {
    /// Row-major `[mel_dim×mel_dim]`, identity plus a small random part.
    pub map: Vec<f64>,
    /// Additive spectral profile `[mel_dim]`.
    pub profile: Vec<f64>,
    /// Multiplies every base duration, in `[0.7, 1.4]`.
    pub duration_scale: f64,
    pub pitch_offset: f64,
}

/// The generator's ground truth, derived deterministically from an
/// [`OracleConfig`].
#[derive(Clone, Debug, PartialEq)]
pub struct OracleSpec {
    pub config: OracleConfig,
    /// Smooth mel template per phoneme, `[vocab][mel_dim]`.
    pub prototypes: Vec<Vec<f64>>,
    pub base_durations: Vec<usize>,
    pub base_pitch: Vec<f64>,
    /// Spectral shape that frame pitch is multiplied into, `[mel_dim]`.
    pub pitch_profile: Vec<f64>,
    pub speakers: Vec<SpeakerTransform>,
}

/// One generated sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub utterance_id: u32,
    pub speaker_id: u32,
    pub phonemes: Vec<u32>,
    pub durations: Vec<usize>,
    /// Frame-level pitch `[T]`.
    pub pitch: Vec<f64>,
    /// `[T×mel_dim]`
    pub mel: Tensor,
    pub transcript_present: bool,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.durations.iter().sum()
    }
}

/// Utterance ids from here on are never part of a generated corpus; they are
/// used for noise-free reference statistics.
pub const REFERENCE_UTTERANCE_BASE: u32 = 1 << 24;
const REFERENCE_UTTERANCES: u32 = 32;

fn bump(k: usize, center: f64, width: f64) -> f64 {
    let z = (k as f64 - center) / width;
    (-0.5 * z * z).exp()
}

impl OracleSpec {
    pub fn new(config: &OracleConfig) -> Result<Self> {
        config.validate()?;
        let m = config.mel_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let tilt = |k: usize| if m == 1 { 0.0 } else { 0.3 * (1.0 - 2.0 * k as f64 / (m - 1) as f64) };

        let mut prototypes = Vec::with_capacity(config.phoneme_vocab_size);
        for _ in 0..config.phoneme_vocab_size {
            let bumps: Vec<(f64, f64, f64)> = (0..2)
                .map(|_| (rng.random_range(0.5..1.5), rng.random_range(0.0..m as f64), rng.random_range(1.0..2.5)))
                .collect();
            prototypes.push((0..m).map(|k| tilt(k) + bumps.iter().map(|&(a, c, w)| a * bump(k, c, w)).sum::<f64>()).collect());
        }
        let base_durations = (0..config.phoneme_vocab_size).map(|_| rng.random_range(1..=config.max_base_duration)).collect();
        let base_pitch = (0..config.phoneme_vocab_size).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pitch_profile = (0..m).map(|k| 0.3 * (std::f64::consts::PI * k as f64 / m as f64).cos()).collect();

        let scale = 0.25 / (m as f64).sqrt();
        let speakers = (0..config.n_speakers())
            .map(|_| {
                let mut map = vec![0.0; m * m];
                for (i, v) in map.iter_mut().enumerate() {
                    let r: f64 = rng.sample(StandardNormal);
                    *v = r * scale + if i / m == i % m { 1.0 } else { 0.0 };
                }
                let bumps: Vec<(f64, f64, f64)> = (0..2)
                    .map(|_| {
                        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                        (sign * rng.random_range(0.6..1.2), rng.random_range(0.0..m as f64), rng.random_range(1.5..3.5))
                    })
                    .collect();
                let profile = (0..m).map(|k| bumps.iter().map(|&(a, c, w)| a * bump(k, c, w)).sum()).collect();
                SpeakerTransform {
                    map,
                    profile,
                    duration_scale: rng.random_range(0.7..=1.4),
                    pitch_offset: rng.random_range(-0.5..0.5),
                }
            })
            .collect();
        Ok(OracleSpec { config: config.clone(), prototypes, base_durations, base_pitch, pitch_profile, speakers })
    }

    fn speaker_transform(&self, speaker_id: u32) -> Result<&SpeakerTransform> {
        self.speakers.get(speaker_id as usize).ok_or(Error::UnknownSpeaker(speaker_id))
    }

    fn stream(&self, speaker_id: u32, utterance_id: u32, which: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(((speaker_id as u64) << 33) | ((utterance_id as u64) << 1) | which);
        rng
    }

    /// The phoneme sequence of utterance `utterance_id` of `speaker_id`.
    pub fn sample_text(&self, speaker_id: u32, utterance_id: u32) -> Vec<u32> {
        let mut rng = self.stream(speaker_id, utterance_id, 0);
        let c = &self.config;
        let len = rng.random_range(c.min_phonemes..=c.max_phonemes);
        (0..len).map(|_| rng.random_range(0..c.phoneme_vocab_size as u32)).collect()
    }

    /// Speaker-scaled durations for `phonemes`, at least one frame each.
    pub fn durations(&self, speaker_id: u32, phonemes: &[u32]) -> Result<Vec<usize>> {
        let s = self.speaker_transform(speaker_id)?;
        Ok(phonemes
            .iter()
            .map(|&p| ((s.duration_scale * self.base_durations[p as usize] as f64).round() as usize).max(1))
            .collect())
    }

    /// Generates utterance `utterance_id` of `speaker_id`.
    pub fn generate(&self, speaker_id: u32, utterance_id: u32) -> Result<Utterance> {
        let text = self.sample_text(speaker_id, utterance_id);
        self.render(speaker_id, utterance_id, &text, true)
    }

    /// Renders `phonemes` in the voice of `speaker_id`. Without noise the
    /// result depends on the speaker and phonemes only.
    pub fn render(&self, speaker_id: u32, utterance_id: u32, phonemes: &[u32], noise: bool) -> Result<Utterance> {
        let c = &self.config;
        if phonemes.is_empty() {
            return Err(Error::Contract("cannot render an empty phoneme sequence".into()));
        }
        if let Some(bad) = phonemes.iter().find(|&&p| p as usize >= c.phoneme_vocab_size) {
            return Err(Error::Contract(format!("phoneme id {bad} outside vocabulary")));
        }
        let s = self.speaker_transform(speaker_id)?;
        let durations = self.durations(speaker_id, phonemes)?;
        let m = c.mel_dim;
        let total: usize = durations.iter().sum();
        let mut rng = self.stream(speaker_id, utterance_id, 1);
        let mut pitch = Vec::with_capacity(total);
        let mut mel = Vec::with_capacity(total * m);
        let mut x = vec![0.0; m];
        for (i, (&p, &d)) in phonemes.iter().zip(&durations).enumerate() {
            let next = phonemes.get(i + 1).copied().unwrap_or(p) as usize;
            let prev = if i == 0 { 0.0 } else { self.base_pitch[phonemes[i - 1] as usize] };
            let level = self.base_pitch[p as usize] + 0.2 * prev + s.pitch_offset;
            for j in 0..d {
                let u = (j as f64 + 0.5) / d as f64;
                let f0 = level + 0.2 * (u - 0.5);
                let w = 0.3 * u;
                for (k, xk) in x.iter_mut().enumerate() {
                    *xk = (1.0 - w) * self.prototypes[p as usize][k] + w * self.prototypes[next][k];
                }
                for r in 0..m {
                    let row = &s.map[r * m..(r + 1) * m];
                    let mut y = row.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>();
                    y += s.profile[r] + f0 * self.pitch_profile[r];
                    if noise && c.noise_sigma > 0.0 {
                        let z: f64 = rng.sample(StandardNormal);
                        y += c.noise_sigma * z;
                    }
                    mel.push(y);
                }
                pitch.push(f0);
            }
        }
        Ok(Utterance {
            utterance_id,
            speaker_id,
            phonemes: phonemes.to_vec(),
            durations,
            pitch,
            mel: Tensor::matrix(total, m, mel)?,
            transcript_present: true,
        })
    }

    /// Per-dimension mel mean of a speaker, averaged over noise-free
    /// reference utterances that no corpus contains. Every speaker reads the
    /// same reference texts.
    pub fn speaker_statistic(&self, speaker_id: u32) -> Result<Vec<f64>> {
        let m = self.config.mel_dim;
        let mut sum = vec![0.0; m];
        let mut frames = 0usize;
        for k in 0..REFERENCE_UTTERANCES {
            let id = REFERENCE_UTTERANCE_BASE + k;
            let u = self.render(speaker_id, id, &self.sample_text(0, id), false)?;
            for t in 0..u.frames() {
                sum.iter_mut().zip(u.mel.row(t)).for_each(|(s, v)| *s += v);
            }
            frames += u.frames();
        }
        Ok(sum.into_iter().map(|s| s / frames as f64).collect())
    }
}
