use crate::backbone::{GroupSet, ParameterGroup};
use crate::config::TrainConfig;
use crate::numerics::AdamHyper;

use super::Stage;

/// One term of a stage's training objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LossTerm {
    /// Mel MAE of the transcript path with oracle durations, pitch and
    /// extracted acoustic condition.
    Mel,
    /// Log-domain duration MSE.
    Duration,
    /// Frame pitch MSE.
    Pitch,
    /// Acoustic-predictor MSE against the stop-gradient extractor output.
    Acoustic,
    /// Mel MAE of the transcript-free mel-encoder path.
    Reconstruction,
    /// Latent L2 between mel-encoder output and expanded phoneme hidden.
    Alignment,
}

impl LossTerm {
    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Mel => "mel",
            LossTerm::Duration => "duration",
            LossTerm::Pitch => "pitch",
            LossTerm::Acoustic => "acoustic",
            LossTerm::Reconstruction => "reconstruction",
            LossTerm::Alignment => "alignment",
        }
    }

    /// Whether the term needs phoneme-level supervision.
    pub fn needs_transcript(self) -> bool {
        !matches!(self, LossTerm::Reconstruction)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LrSchedule {
    Constant(f64),
    /// `peak · min(s / warmup, sqrt(warmup / s))` at 1-based step `s`.
    InverseSqrtWarmup { peak: f64, warmup: usize },
}

impl LrSchedule {
    pub fn at(&self, step: usize) -> f64 {
        match *self {
            LrSchedule::Constant(lr) => lr,
            LrSchedule::InverseSqrtWarmup { peak, warmup } => {
                let s = step.max(1) as f64;
                let w = warmup.max(1) as f64;
                peak * (s / w).min((w / s).sqrt())
            }
        }
    }
}

/// What a pipeline stage trains and how.
#[derive(Clone, Debug, PartialEq)]
pub struct StagePlan {
    pub stage: Stage,
    pub trainable: GroupSet,
    /// Only this row of the speaker table may change, when set.
    pub speaker_row: Option<u32>,
    pub losses: Vec<(LossTerm, f64)>,
    pub steps: usize,
    pub schedule: LrSchedule,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamHyper,
}

fn stage_seed(base: u64, stage: Stage, salt: u64) -> u64 {
    base ^ ((stage.tag() as u64) << 56) ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

impl StagePlan {
    /// Transcribed training of every group except the mel encoder.
    pub fn source(t: &TrainConfig) -> Self {
        StagePlan {
            stage: Stage::SourceTraining,
            trainable: GroupSet::all().without(ParameterGroup::MelEncoder),
            speaker_row: None,
            losses: vec![(LossTerm::Mel, 1.0), (LossTerm::Duration, 1.0), (LossTerm::Pitch, 1.0), (LossTerm::Acoustic, 1.0)],
            steps: t.source_steps,
            schedule: LrSchedule::InverseSqrtWarmup { peak: t.source_peak_lr, warmup: t.warmup_steps },
            batch_size: t.batch_size,
            seed: stage_seed(t.seed, Stage::SourceTraining, 0),
            adam: t.adam(),
        }
    }

    /// Mel encoder only: reconstruction through the frozen decoder plus the
    /// weighted latent alignment.
    pub fn align(t: &TrainConfig) -> Self {
        StagePlan {
            stage: Stage::MelEncoderAligning,
            trainable: GroupSet::EMPTY.with(ParameterGroup::MelEncoder),
            speaker_row: None,
            losses: vec![(LossTerm::Reconstruction, 1.0), (LossTerm::Alignment, t.alignment_weight)],
            steps: t.align_steps,
            schedule: LrSchedule::Constant(t.align_lr),
            batch_size: t.batch_size,
            seed: stage_seed(t.seed, Stage::MelEncoderAligning, 0),
            adam: t.adam(),
        }
    }

    /// Conditional layer norm (and optionally the speaker's own embedding
    /// row) by untranscribed reconstruction.
    pub fn adapt(t: &TrainConfig, speaker_id: u32) -> Self {
        let mut trainable = GroupSet::EMPTY.with(ParameterGroup::ConditionalLN);
        if t.adapt_speaker_row {
            trainable = trainable.with(ParameterGroup::SpeakerTable);
        }
        StagePlan {
            stage: Stage::UntranscribedAdaptation,
            trainable,
            speaker_row: t.adapt_speaker_row.then_some(speaker_id),
            losses: vec![(LossTerm::Reconstruction, 1.0)],
            steps: t.adapt_steps,
            schedule: LrSchedule::Constant(t.adapt_lr),
            batch_size: t.adapt_batch_size,
            seed: stage_seed(t.seed, Stage::UntranscribedAdaptation, speaker_id as u64),
            adam: t.adam(),
        }
    }

    pub fn inference() -> Self {
        StagePlan {
            stage: Stage::Inference,
            trainable: GroupSet::EMPTY,
            speaker_row: None,
            losses: Vec::new(),
            steps: 0,
            schedule: LrSchedule::Constant(0.0),
            batch_size: 1,
            seed: 0,
            adam: AdamHyper::default(),
        }
    }

    /// Baseline that trains the mel encoder together with everything else
    /// in one transcribed stage.
    pub fn joint(t: &TrainConfig) -> Self {
        let mut plan = Self::source(t);
        plan.trainable = GroupSet::all();
        plan.losses.push((LossTerm::Reconstruction, 1.0));
        plan.losses.push((LossTerm::Alignment, t.alignment_weight));
        plan
    }

    pub fn needs_transcript(&self) -> bool {
        self.losses.iter().any(|(l, _)| l.needs_transcript())
    }

    pub fn weight(&self, term: LossTerm) -> Option<f64> {
        self.losses.iter().find(|(l, _)| *l == term).map(|(_, w)| *w)
    }
}
