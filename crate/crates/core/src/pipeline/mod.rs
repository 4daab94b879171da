//! The staged adaptation procedure: source training, mel-encoder aligning,
//! untranscribed adaptation and inference, each with a declared trainable
//! parameter set that is verified bit for bit after the stage runs.

mod checkpoint;
mod experiment;
mod metrics;
mod plan;
mod stage;
mod synth;
mod train;

pub use checkpoint::{Checkpoint, RngState, CHECKPOINT_VERSION};
pub use experiment::{ArmOutcome, Experiment, Recipe, RecipeReport, SweepRow, Variant};
pub use metrics::{MetricRow, MetricsLog, SMOOTHING};
pub use plan::{LossTerm, LrSchedule, StagePlan};
pub use stage::Stage;
pub use synth::{evaluate_arm, synthesize, teacher_forced_synthesis, ArmEvaluation};
pub use train::{adapt_untranscribed, align_mel_encoder, train_source, verify_freeze};


#[cfg(test)]
mod tests;
