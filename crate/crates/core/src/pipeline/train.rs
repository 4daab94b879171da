use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{Checkpoint, RngState};
use super::metrics::MetricsLog;
use super::plan::{LossTerm, StagePlan};
use super::Stage;
use crate::backbone::{
    length_regulate, AcousticSource, DurationSequence, DurationSource, Graph, ParamStore, ParameterGroup,
    PhonemeSequence, PitchSource, TtsInputs, TtsModel,
};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::melencoder::{alignment_loss, reconstruction_forward, AlignmentBatch};
use crate::numerics::{adam_step, AdamState, Tensor, Var};
use crate::synthdata::{AdaptationSet, Corpus, Split, Utterance};

/// A training example as seen by the loss.
#[derive(Clone, Copy, Debug)]
pub(crate) enum Example<'a> {
    Transcribed(&'a Utterance),
    MelOnly { speaker_id: u32, mel: &'a Tensor },
}

fn constant(g: &mut Graph, t: Tensor) -> Var {
    g.tape.constant(t)
}

/// Weighted total and the individual term values, in `plan.losses` order.
fn example_loss(model: &TtsModel, g: &mut Graph, ex: Example, plan: &StagePlan) -> Result<(Var, Vec<f64>)> {
    let wants = |t: LossTerm| plan.weight(t).is_some();
    let mut terms: Vec<Var> = Vec::with_capacity(plan.losses.len());
    match ex {
        Example::MelOnly { speaker_id, mel } => {
            for (term, _) in &plan.losses {
                if *term != LossTerm::Reconstruction {
                    return Err(Error::Contract(format!("{} loss needs a transcript", term.name())));
                }
                let out = reconstruction_forward(model, g, mel, speaker_id)?;
                let target = constant(g, mel.clone());
                terms.push(g.tape.mean_abs_diff(out.mel, target)?);
            }
        }
        Example::Transcribed(u) => {
            let cfg = model.config();
            let phonemes = PhonemeSequence::new(u.phonemes.clone(), cfg.phoneme_vocab_size)?;
            let durations = DurationSequence::paired(u.durations.clone(), &phonemes)?;
            let tts = if [LossTerm::Mel, LossTerm::Duration, LossTerm::Pitch, LossTerm::Acoustic].into_iter().any(wants) {
                Some(model.tts_forward(
                    g,
                    TtsInputs {
                        phonemes: &phonemes,
                        speaker_id: u.speaker_id,
                        durations: DurationSource::Oracle(&durations),
                        pitch: PitchSource::Oracle(&u.pitch),
                        acoustic: AcousticSource::Extracted(&u.mel),
                    },
                )?)
            } else {
                None
            };
            let rec = if wants(LossTerm::Reconstruction) || wants(LossTerm::Alignment) {
                Some(reconstruction_forward(model, g, &u.mel, u.speaker_id)?)
            } else {
                None
            };
            for (term, _) in &plan.losses {
                let v = match term {
                    LossTerm::Mel | LossTerm::Duration | LossTerm::Pitch | LossTerm::Acoustic => {
                        let out = tts.as_ref().expect("computed above");
                        match term {
                            LossTerm::Mel => {
                                let t = constant(g, u.mel.clone());
                                g.tape.mean_abs_diff(out.mel, t)?
                            }
                            LossTerm::Duration => {
                                let target = u.durations.iter().map(|&d| (d as f64 + 1.0).ln()).collect();
                                let t = constant(g, Tensor::vector(target)?);
                                g.tape.mean_sq_diff(out.log_durations, t)?
                            }
                            LossTerm::Pitch => {
                                let t = constant(g, Tensor::vector(u.pitch.clone())?);
                                g.tape.mean_sq_diff(out.pitch_prediction, t)?
                            }
                            _ => {
                                let target = out.acoustic_target.expect("extracted acoustic source");
                                g.tape.mean_sq_diff(out.acoustic_prediction, target)?
                            }
                        }
                    }
                    LossTerm::Reconstruction => {
                        let out = rec.expect("computed above");
                        let t = constant(g, u.mel.clone());
                        g.tape.mean_abs_diff(out.mel, t)?
                    }
                    LossTerm::Alignment => {
                        let out = rec.expect("computed above");
                        let expanded = match &tts {
                            Some(o) => o.expanded_hidden,
                            None => {
                                let h = model.encode_phonemes(g, &phonemes)?;
                                length_regulate(g, h, &durations)?
                            }
                        };
                        let batch = AlignmentBatch::unpadded(g, out.mel_hidden, expanded);
                        alignment_loss(g, &batch)?
                    }
                };
                terms.push(v);
            }
        }
    }
    let values: Vec<f64> = terms.iter().map(|&v| g.tape.value(v).data()[0]).collect();
    let mut total: Option<Var> = None;
    for (&v, (_, w)) in terms.iter().zip(&plan.losses) {
        if *w == 0.0 {
            continue;
        }
        let scaled = if *w == 1.0 { v } else { g.tape.scale(v, *w) };
        total = Some(match total {
            Some(t) => g.tape.add(t, scaled)?,
            None => scaled,
        });
    }
    let total = total.ok_or_else(|| Error::Config("every loss term has weight zero".into()))?;
    Ok((total, values))
}

/// Runs `plan.steps` optimizer steps. On failure returns the step index with
/// the error; parameters then still hold the last completed update.
fn run_stage(
    model: &mut TtsModel,
    plan: &StagePlan,
    examples: &[Example],
    log: &mut MetricsLog,
) -> std::result::Result<(AdamState, ChaCha8Rng), (usize, Error)> {
    let stage = plan.stage.name();
    let trainable: Vec<usize> = model
        .params()
        .entries()
        .iter()
        .enumerate()
        .filter(|(_, e)| plan.trainable.contains(e.group))
        .map(|(i, _)| i)
        .collect();
    let labels: Vec<String> = trainable
        .iter()
        .map(|&i| {
            let e = &model.params().entries()[i];
            format!("{}/{}", e.group, e.name)
        })
        .collect();
    let mut adam = AdamState::new(
        plan.adam,
        plan.schedule.at(1),
        trainable.iter().map(|&i| {
            let e = &model.params().entries()[i];
            (e.name.as_str(), e.tensor.numel())
        }),
    );
    let table = model.speaker_table_id();
    let spk_dim = model.config().speaker_embedding_dim;

    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    if plan.steps == 0 {
        return Ok((adam, rng));
    }
    if examples.is_empty() {
        return Err((0, Error::Config(format!("{stage} stage has no training data"))));
    }
    let batch = plan.batch_size.min(examples.len());
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut cursor = order.len();

    for step in 0..plan.steps {
        let fail = |e: Error| (step, e);
        let mut picks = Vec::with_capacity(batch);
        while picks.len() < batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            picks.push(order[cursor]);
            cursor += 1;
        }

        let mut acc: Vec<Option<Vec<f64>>> = vec![None; model.params().len()];
        let mut sums = vec![0.0; plan.losses.len()];
        let mut total_sum = 0.0;
        for &i in &picks {
            let mut g = Graph::new(model.params(), plan.trainable);
            let (total, values) = example_loss(model, &mut g, examples[i], plan).map_err(fail)?;
            let t = g.tape.value(total).data()[0];
            if !t.is_finite() {
                return Err(fail(Error::NonFinite(format!("{stage} loss at step {step}"))));
            }
            total_sum += t;
            sums.iter_mut().zip(&values).for_each(|(s, v)| *s += v);
            g.tape.backward(total).map_err(fail)?;
            for (id, grad) in g.param_grads() {
                let slot = acc[id.0].get_or_insert_with(|| vec![0.0; grad.len()]);
                slot.iter_mut().zip(grad).for_each(|(a, b)| *a += b);
            }
        }
        let n = picks.len() as f64;
        for ((term, _), s) in plan.losses.iter().zip(&sums) {
            log.push(step, stage, term.name(), s / n);
        }
        log.push(step, stage, "total", total_sum / n);

        if let (Some(row), Some(grad)) = (plan.speaker_row, acc[table.0].as_mut()) {
            for (r, chunk) in grad.chunks_mut(spk_dim).enumerate() {
                if r != row as usize {
                    chunk.iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }

        adam.learning_rate = plan.schedule.at(step + 1);
        let store = model.params_mut();
        let mut params: Vec<(&str, &mut Tensor)> = Vec::with_capacity(trainable.len());
        let mut next = trainable.iter().zip(&labels).peekable();
        for (i, entry) in store.entries_mut().enumerate() {
            let Some((_, label)) = next.next_if(|(&j, _)| j == i) else { continue };
            match acc[i].take() {
                Some(mut grad) => {
                    grad.iter_mut().for_each(|v| *v /= n);
                    entry.tensor.set_grad(grad).map_err(fail)?;
                }
                None => entry.tensor.clear_grad(),
            }
            params.push((label.as_str(), &mut entry.tensor));
        }
        let result = adam_step(&mut params, &mut adam);
        params.iter_mut().for_each(|(_, t)| t.clear_grad());
        result.map_err(fail)?;
    }
    Ok((adam, rng))
}

fn bits_equal(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Names of parameters whose bits differ between two stores of one registry.
pub(crate) fn changed_parameters(a: &ParamStore, b: &ParamStore) -> Result<Vec<String>> {
    if a.len() != b.len() || a.entries().iter().zip(b.entries()).any(|(x, y)| x.name != y.name) {
        return Err(Error::Contract("parameter registries differ".into()));
    }
    Ok(a.entries()
        .iter()
        .zip(b.entries())
        .filter(|(x, y)| x.tensor.shape() != y.tensor.shape() || !bits_equal(x.tensor.data(), y.tensor.data()))
        .map(|(x, _)| x.name.clone())
        .collect())
}

/// Checks that only parameters the plan may train differ, bit for bit.
pub fn verify_freeze(before: &ParamStore, after: &ParamStore, plan: &StagePlan) -> Result<()> {
    let mut violations = Vec::new();
    for name in changed_parameters(before, after)? {
        let entry = after.get(&name).expect("same registry");
        if !plan.trainable.contains(entry.group) {
            violations.push(name);
            continue;
        }
        if let (ParameterGroup::SpeakerTable, Some(row)) = (entry.group, plan.speaker_row) {
            let old = &before.get(&name).expect("same registry").tensor;
            for r in 0..old.rows() {
                if r != row as usize && !bits_equal(old.row(r), entry.tensor.row(r)) {
                    violations.push(format!("{name}[{r}]"));
                }
            }
        }
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(Error::FreezeViolation { stage: plan.stage, params: violations })
    }
}

fn finish(
    config: &ExperimentConfig,
    plan: &StagePlan,
    mut model: TtsModel,
    before: &ParamStore,
    run: std::result::Result<(AdamState, ChaCha8Rng), (usize, Error)>,
    after: impl FnOnce(&mut TtsModel) -> Result<()>,
) -> Result<Checkpoint> {
    match run {
        Ok((adam, rng)) => {
            verify_freeze(before, model.params(), plan)?;
            after(&mut model)?;
            Ok(Checkpoint { config: config.clone(), stage: plan.stage, model, adam: Some(adam), rng: RngState::capture(&rng) })
        }
        Err((step, e)) => {
            let rng = RngState::capture(&ChaCha8Rng::seed_from_u64(plan.seed));
            let last_good = Checkpoint { config: config.clone(), stage: plan.stage, model, adam: None, rng };
            Err(Error::Aborted { stage: plan.stage, step, last_good: Box::new(last_good), source: Box::new(e) })
        }
    }
}

fn transcribed_training_set<'c>(corpus: &'c Corpus, config: &ExperimentConfig) -> Result<Vec<Example<'c>>> {
    corpus.ensure_mel_dim(config.model.mel_dim)?;
    if corpus.config.phoneme_vocab_size != config.model.phoneme_vocab_size {
        return Err(Error::Config("corpus and model phoneme vocabularies differ".into()));
    }
    let utts = corpus.source(Split::Train);
    let speakers: std::collections::BTreeSet<u32> = utts.iter().map(|u| u.speaker_id).collect();
    if speakers.len() < 2 {
        return Err(Error::Config("source training needs at least two speakers".into()));
    }
    if let Some(u) = utts.iter().find(|u| !u.transcript_present) {
        return Err(Error::Config(format!("utterance {} of speaker {} has no transcript", u.utterance_id, u.speaker_id)));
    }
    if let Some(&s) = speakers.iter().find(|&&s| s as usize >= config.model.n_speakers) {
        return Err(Error::UnknownSpeaker(s));
    }
    Ok(utts.into_iter().map(Example::Transcribed).collect())
}

/// Trains a fresh model on the transcribed source speakers, then resets the
/// unseen speaker rows to the mean of the trained ones.
pub fn train_source(corpus: &Corpus, config: &ExperimentConfig, plan: &StagePlan, log: &mut MetricsLog) -> Result<Checkpoint> {
    config.validate()?;
    if plan.stage != Stage::SourceTraining {
        return Err(Error::Config(format!("train_source given a {} plan", plan.stage)));
    }
    let examples = transcribed_training_set(corpus, config)?;
    let mut model = TtsModel::new(config.model.clone(), config.train.seed)?;
    let before = model.params().clone();
    let run = run_stage(&mut model, plan, &examples, log);
    let n_trained = corpus.config.n_source_speakers;
    finish(config, plan, model, &before, run, |m| m.init_unseen_speakers(n_trained))
}

/// Trains only the mel encoder against the frozen source model, on the same
/// transcribed data the source model saw.
pub fn align_mel_encoder(
    source: &Checkpoint,
    corpus: &Corpus,
    plan: &StagePlan,
    log: &mut MetricsLog,
) -> Result<Checkpoint> {
    if source.stage != Stage::SourceTraining {
        return Err(Error::Config(format!("aligning needs a source checkpoint, got a {} checkpoint", source.stage)));
    }
    if plan.stage != Stage::MelEncoderAligning {
        return Err(Error::Config(format!("align_mel_encoder given a {} plan", plan.stage)));
    }
    let examples = transcribed_training_set(corpus, &source.config)?;
    let mut model = source.model.clone();
    let run = run_stage(&mut model, plan, &examples, log);
    finish(&source.config, plan, model, source.model.params(), run, |_| Ok(()))
}

/// Fine-tunes the permitted parameters on one speaker's untranscribed mels
/// by reconstruction through the mel encoder.
pub fn adapt_untranscribed(
    aligned: &Checkpoint,
    set: &AdaptationSet,
    plan: &StagePlan,
    log: &mut MetricsLog,
) -> Result<Checkpoint> {
    if plan.stage != Stage::UntranscribedAdaptation {
        return Err(Error::Config(format!("adapt_untranscribed given a {} plan", plan.stage)));
    }
    if plan.needs_transcript() {
        return Err(Error::Contract("adaptation losses must not need a transcript".into()));
    }
    let speaker_id = set.speaker_id();
    if speaker_id as usize >= aligned.config.model.n_speakers {
        return Err(Error::UnknownSpeaker(speaker_id));
    }
    if plan.speaker_row.is_some_and(|r| r != speaker_id) {
        return Err(Error::Config(format!("plan adapts speaker row {:?}, data is speaker {speaker_id}", plan.speaker_row)));
    }
    if set.mel_dim() != aligned.config.model.mel_dim {
        return Err(Error::Config(format!("adaptation mels have {} bins, model expects {}", set.mel_dim(), aligned.config.model.mel_dim)));
    }
    let examples: Vec<Example> = (0..set.len()).map(|i| Example::MelOnly { speaker_id, mel: set.mel(i) }).collect();
    let mut model = aligned.model.clone();
    let run = run_stage(&mut model, plan, &examples, log);
    finish(&aligned.config, plan, model, aligned.model.params(), run, |_| Ok(()))
}
