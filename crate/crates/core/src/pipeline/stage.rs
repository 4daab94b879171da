use std::fmt;

use serde::{Deserialize, Serialize};

/// The four steps of the adaptation procedure.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    SourceTraining,
    MelEncoderAligning,
    UntranscribedAdaptation,
    Inference,
}

impl Stage {
    pub const ALL: [Stage; 4] =
        [Stage::SourceTraining, Stage::MelEncoderAligning, Stage::UntranscribedAdaptation, Stage::Inference];

    pub fn tag(self) -> u8 {
        match self {
            Stage::SourceTraining => 1,
            Stage::MelEncoderAligning => 2,
            Stage::UntranscribedAdaptation => 3,
            Stage::Inference => 4,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Stage> {
        Stage::ALL.into_iter().find(|s| s.tag() == tag)
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::SourceTraining => "source",
            Stage::MelEncoderAligning => "align",
            Stage::UntranscribedAdaptation => "adapt",
            Stage::Inference => "inference",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}
