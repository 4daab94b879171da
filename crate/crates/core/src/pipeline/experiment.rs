use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use super::checkpoint::Checkpoint;
use super::metrics::MetricsLog;
use super::plan::{LossTerm, StagePlan};
use super::synth::{evaluate_arm, ArmEvaluation};
use super::train::{adapt_untranscribed, align_mel_encoder, train_source};
use crate::backbone::ParameterGroup;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::evalmetrics::{paired_report, ArmMetrics, PairedReport, SpeakerStatistics, ARM_CSV_HEADER};
use crate::synthdata::{Corpus, Split, Utterance};

/// One arm of a paired comparison.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Variant {
    /// Source training, aligning, adaptation of the conditional layer norm.
    Main,
    /// The aligned model with no adaptation at all.
    ZeroShot,
    /// Aligning with the latent alignment weight set to zero.
    NoL2,
    /// Adaptation also trains the mel encoder and decoder core.
    FinetuneAll,
    /// Mel encoder trained together with the rest in one transcribed stage.
    Joint,
    /// The main pipeline adapted on this many utterances.
    DataSweep(usize),
}

impl Variant {
    pub fn name(self) -> String {
        match self {
            Variant::Main => "main".into(),
            Variant::ZeroShot => "zero_shot".into(),
            Variant::NoL2 => "no_l2".into(),
            Variant::FinetuneAll => "finetune_mel_encoder_and_decoder".into(),
            Variant::Joint => "joint_training".into(),
            Variant::DataSweep(n) => format!("sweep_n{n}"),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

/// A named bundle of arms with its report layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Recipe {
    Main,
    Joint,
    NoL2,
    FinetuneAll,
    DataSweep,
}

impl Recipe {
    pub const ALL: [Recipe; 5] = [Recipe::Main, Recipe::Joint, Recipe::NoL2, Recipe::FinetuneAll, Recipe::DataSweep];

    pub fn name(self) -> &'static str {
        match self {
            Recipe::Main => "main",
            Recipe::Joint => "joint",
            Recipe::NoL2 => "no-l2",
            Recipe::FinetuneAll => "finetune-all",
            Recipe::DataSweep => "data-sweep",
        }
    }

    /// The treatment arm compared against the main arm, if any.
    fn baseline(self) -> Option<Variant> {
        match self {
            Recipe::Main => Some(Variant::ZeroShot),
            Recipe::Joint => Some(Variant::Joint),
            Recipe::NoL2 => Some(Variant::NoL2),
            Recipe::FinetuneAll => Some(Variant::FinetuneAll),
            Recipe::DataSweep => None,
        }
    }
}

impl FromStr for Recipe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Recipe::ALL.into_iter().find(|r| r.name() == s).ok_or_else(|| {
            let names: Vec<_> = Recipe::ALL.iter().map(|r| r.name()).collect();
            Error::Config(format!("unknown recipe {s:?}, expected one of {}", names.join(", ")))
        })
    }
}

impl fmt::Display for Recipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug)]
pub struct ArmOutcome {
    pub variant: Variant,
    pub evaluation: ArmEvaluation,
    /// One adapted checkpoint per adaptation speaker; empty for zero-shot.
    pub adapted: Vec<Checkpoint>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepRow {
    pub n: usize,
    pub mel_mae: f64,
    pub speaker_proximity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecipeReport {
    pub recipe: Recipe,
    pub seed: u64,
    pub arms: Vec<ArmEvaluation>,
    /// Main arm first, for each metric.
    pub paired: Vec<PairedReport>,
    pub sweep: Vec<SweepRow>,
}

impl RecipeReport {
    /// Per-utterance values of every arm and every paired delta.
    pub fn metrics_csv(&self) -> String {
        let mut s = format!("{ARM_CSV_HEADER}\n");
        for arm in &self.arms {
            s += &arm.mae.csv_rows();
            s += &arm.proximity.csv_rows();
        }
        for p in &self.paired {
            s += &p.csv_rows();
        }
        s
    }

    pub fn sweep_csv(&self) -> String {
        let mut s = String::from("n,mel_mae,speaker_proximity\n");
        for r in &self.sweep {
            let _ = writeln!(s, "{},{:?},{:?}", r.n, r.mel_mae, r.speaker_proximity);
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = format!("recipe {} seed {}\n", self.recipe, self.seed);
        for arm in &self.arms {
            let _ = writeln!(
                s,
                "{}: mel_mae {:.6}, speaker_proximity {:.6} over {} utterances",
                arm.mae.arm,
                arm.mae.mean(),
                arm.proximity.mean(),
                arm.mae.values.len()
            );
        }
        for p in &self.paired {
            let _ = writeln!(s, "{}", p.summary());
        }
        for r in &self.sweep {
            let _ = writeln!(s, "n={}: mel_mae {:.6}, speaker_proximity {:.6}", r.n, r.mel_mae, r.speaker_proximity);
        }
        s
    }
}

/// Runs and caches the shared stages so that every arm of every recipe
/// starts from the same checkpoints.
pub struct Experiment {
    config: ExperimentConfig,
    corpus: Corpus,
    stats: SpeakerStatistics,
    pub log: MetricsLog,
    source: Option<Checkpoint>,
    aligned: Option<Checkpoint>,
    aligned_no_l2: Option<Checkpoint>,
    joint: Option<Checkpoint>,
    arms: BTreeMap<Variant, ArmOutcome>,
}

fn relabel(log: MetricsLog, stage: &str) -> MetricsLog {
    let mut log = log;
    log.rows.iter_mut().for_each(|r| r.stage = stage.to_string());
    log
}

impl Experiment {
    pub fn new(config: ExperimentConfig, corpus: Corpus) -> Result<Self> {
        config.validate()?;
        if corpus.config != config.data {
            return Err(Error::Config("corpus was generated from a different data configuration".into()));
        }
        let stats = SpeakerStatistics::new(&corpus.spec()?)?;
        Ok(Experiment {
            config,
            corpus,
            stats,
            log: MetricsLog::default(),
            source: None,
            aligned: None,
            aligned_no_l2: None,
            joint: None,
            arms: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    pub fn statistics(&self) -> &SpeakerStatistics {
        &self.stats
    }

    /// Held-out utterances of the adaptation speakers.
    pub fn evaluation_set(&self) -> Vec<&Utterance> {
        self.config.data.adaptation_speakers().flat_map(|s| self.corpus.speaker(s, Split::Heldout)).collect()
    }

    pub fn source(&mut self) -> Result<&Checkpoint> {
        if self.source.is_none() {
            let mut log = MetricsLog::default();
            let ckpt = train_source(&self.corpus, &self.config, &StagePlan::source(&self.config.train), &mut log)?;
            self.log.extend(log);
            self.source = Some(ckpt);
        }
        Ok(self.source.as_ref().expect("just set"))
    }

    fn align(&mut self, without_l2: bool) -> Result<Checkpoint> {
        let mut plan = StagePlan::align(&self.config.train);
        let label = if without_l2 {
            plan.losses.iter_mut().filter(|(t, _)| *t == LossTerm::Alignment).for_each(|(_, w)| *w = 0.0);
            "align:no_l2"
        } else {
            "align"
        };
        self.source()?;
        let mut log = MetricsLog::default();
        let ckpt = align_mel_encoder(self.source.as_ref().expect("trained"), &self.corpus, &plan, &mut log)?;
        self.log.extend(relabel(log, label));
        Ok(ckpt)
    }

    pub fn aligned(&mut self) -> Result<&Checkpoint> {
        if self.aligned.is_none() {
            self.aligned = Some(self.align(false)?);
        }
        Ok(self.aligned.as_ref().expect("just set"))
    }

    pub fn aligned_without_l2(&mut self) -> Result<&Checkpoint> {
        if self.aligned_no_l2.is_none() {
            self.aligned_no_l2 = Some(self.align(true)?);
        }
        Ok(self.aligned_no_l2.as_ref().expect("just set"))
    }

    pub fn joint(&mut self) -> Result<&Checkpoint> {
        if self.joint.is_none() {
            let mut log = MetricsLog::default();
            let ckpt = train_source(&self.corpus, &self.config, &StagePlan::joint(&self.config.train), &mut log)?;
            self.log.extend(relabel(log, "joint"));
            self.joint = Some(ckpt);
        }
        Ok(self.joint.as_ref().expect("just set"))
    }

    /// Adapts each adaptation speaker from the arm's starting checkpoint and
    /// evaluates on that speaker's held-out utterances.
    pub fn run_variant(&mut self, variant: Variant) -> Result<&ArmOutcome> {
        if !self.arms.contains_key(&variant) {
            let outcome = self.compute_variant(variant)?;
            self.arms.insert(variant, outcome);
        }
        Ok(&self.arms[&variant])
    }

    fn compute_variant(&mut self, variant: Variant) -> Result<ArmOutcome> {
        let t = self.config.train.clone();
        let seed = t.seed;
        let n_utts = match variant {
            Variant::DataSweep(n) => n,
            _ => t.adapt_utterances,
        };
        if let Variant::DataSweep(n) = variant {
            if n == t.adapt_utterances {
                let main = self.run_variant(Variant::Main)?.clone();
                let rename = |m: &ArmMetrics| ArmMetrics { arm: variant.name(), ..m.clone() };
                let evaluation =
                    ArmEvaluation { mae: rename(&main.evaluation.mae), proximity: rename(&main.evaluation.proximity) };
                return Ok(ArmOutcome { variant, evaluation, adapted: main.adapted });
            }
        }
        let base = match variant {
            Variant::NoL2 => self.aligned_without_l2()?.clone(),
            Variant::Joint => self.joint()?.clone(),
            _ => self.aligned()?.clone(),
        };
        let mut evaluation = ArmEvaluation {
            mae: ArmMetrics::new(variant.name(), seed, "mel_mae"),
            proximity: ArmMetrics::new(variant.name(), seed, "speaker_proximity"),
        };
        let mut adapted = Vec::new();
        for spk in self.config.data.adaptation_speakers() {
            let heldout = self.corpus.speaker(spk, Split::Heldout);
            let model = if variant == Variant::ZeroShot {
                base.model.clone()
            } else {
                let set = self.corpus.strip_transcripts(spk, Split::Train)?.first(n_utts)?;
                let mut plan = StagePlan::adapt(&t, spk);
                if variant == Variant::FinetuneAll {
                    plan.trainable = plan.trainable.with(ParameterGroup::MelEncoder).with(ParameterGroup::DecoderCore);
                }
                let mut log = MetricsLog::default();
                let ckpt = adapt_untranscribed(&base, &set, &plan, &mut log)?;
                self.log.extend(relabel(log, &format!("adapt:{variant}:spk{spk}")));
                let model = ckpt.model.clone();
                adapted.push(ckpt);
                model
            };
            let e = evaluate_arm(&model, &variant.name(), seed, &heldout, &self.stats)?;
            evaluation.mae.values.extend(e.mae.values);
            evaluation.proximity.values.extend(e.proximity.values);
        }
        Ok(ArmOutcome { variant, evaluation, adapted })
    }

    pub fn run_recipe(&mut self, recipe: Recipe) -> Result<RecipeReport> {
        let seed = self.config.train.seed;
        let main = self.run_variant(Variant::Main)?.evaluation.clone();
        let mut report = RecipeReport { recipe, seed, arms: vec![main.clone()], paired: Vec::new(), sweep: Vec::new() };
        if let Some(baseline) = recipe.baseline() {
            let other = self.run_variant(baseline)?.evaluation.clone();
            report.paired.push(paired_report(&main.mae, &other.mae)?);
            report.paired.push(paired_report(&main.proximity, &other.proximity)?);
            report.arms.push(other);
        }
        if recipe == Recipe::DataSweep {
            for n in self.config.train.sweep_sizes.clone() {
                let e = self.run_variant(Variant::DataSweep(n))?.evaluation.clone();
                report.sweep.push(SweepRow { n, mel_mae: e.mae.mean(), speaker_proximity: e.proximity.mean() });
                report.arms.push(e);
            }
        }
        Ok(report)
    }
}
