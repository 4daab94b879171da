use super::*;
use crate::backbone::{
    AcousticSource, DurationSequence, DurationSource, Graph, ModelConfig, PhonemeSequence, PitchSource, TtsInputs,
    TtsModel,
};
use crate::config::{ExperimentConfig, TrainConfig};
use crate::error::{Error, FormatError};
use crate::evalmetrics::{mel_distance, DistanceMode, LengthPolicy};
use crate::synthdata::{Corpus, OracleConfig, Split};

fn tiny() -> ExperimentConfig {
    let model = ModelConfig {
        hidden_dim: 8,
        n_heads: 2,
        ffn_filter: 8,
        conv_kernel: 3,
        n_encoder_blocks: 1,
        n_decoder_blocks: 1,
        n_mel_encoder_blocks: 1,
        mel_dim: 6,
        phoneme_vocab_size: 8,
        speaker_embedding_dim: 4,
        n_speakers: 4,
        max_duration: 6,
        acoustic_dim: 2,
        predictor_filter: 8,
        predictor_kernel: 3,
        ..ModelConfig::default()
    };
    let data = OracleConfig {
        seed: 3,
        phoneme_vocab_size: 8,
        mel_dim: 6,
        n_source_speakers: 2,
        utterances_per_source_speaker: 5,
        n_adaptation_speakers: 1,
        utterances_per_adaptation_speaker: 10,
        min_phonemes: 3,
        max_phonemes: 6,
        max_base_duration: 3,
        ..OracleConfig::default()
    };
    let train = TrainConfig {
        source_steps: 5,
        align_steps: 4,
        adapt_steps: 3,
        batch_size: 2,
        adapt_batch_size: 2,
        warmup_steps: 2,
        adapt_utterances: 4,
        sweep_sizes: vec![1, 4],
        ..TrainConfig::default()
    };
    ExperimentConfig { model, data, train }
}

fn setup() -> (ExperimentConfig, Corpus) {
    let cfg = tiny();
    let corpus = Corpus::generate(&cfg.data).unwrap();
    (cfg, corpus)
}

fn source(cfg: &ExperimentConfig, corpus: &Corpus) -> Checkpoint {
    train_source(corpus, cfg, &StagePlan::source(&cfg.train), &mut MetricsLog::default()).unwrap()
}

fn aligned(cfg: &ExperimentConfig, corpus: &Corpus) -> Checkpoint {
    align_mel_encoder(&source(cfg, corpus), corpus, &StagePlan::align(&cfg.train), &mut MetricsLog::default()).unwrap()
}

#[test]
fn first_logged_loss_is_the_fresh_model_loss() {
    let (mut cfg, corpus) = setup();
    let train = corpus.source(Split::Train);
    cfg.train.batch_size = train.len();
    cfg.train.source_steps = 1;
    let mut log = MetricsLog::default();
    train_source(&corpus, &cfg, &StagePlan::source(&cfg.train), &mut log).unwrap();

    let model = TtsModel::new(cfg.model.clone(), cfg.train.seed).unwrap();
    let (mut mel, mut dur, mut pitch, mut acoustic) = (0.0, 0.0, 0.0, 0.0);
    for u in &train {
        let ph = PhonemeSequence::new(u.phonemes.clone(), cfg.model.phoneme_vocab_size).unwrap();
        let d = DurationSequence::paired(u.durations.clone(), &ph).unwrap();
        let mut g = Graph::inference(model.params());
        let out = model
            .tts_forward(
                &mut g,
                TtsInputs {
                    phonemes: &ph,
                    speaker_id: u.speaker_id,
                    durations: DurationSource::Oracle(&d),
                    pitch: PitchSource::Oracle(&u.pitch),
                    acoustic: AcousticSource::Extracted(&u.mel),
                },
            )
            .unwrap();
        let v = |x| g.tape.value(x).data().to_vec();
        mel += mel_distance(g.tape.value(out.mel), &u.mel, DistanceMode::Mae, LengthPolicy::Exact).unwrap().value;
        let ld = v(out.log_durations);
        dur += ld.iter().zip(&u.durations).map(|(p, &n)| (p - (n as f64 + 1.0).ln()).powi(2)).sum::<f64>()
            / ld.len() as f64;
        let pp = v(out.pitch_prediction);
        pitch += pp.iter().zip(&u.pitch).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pp.len() as f64;
        let (ap, at) = (v(out.acoustic_prediction), v(out.acoustic_target.unwrap()));
        acoustic += ap.iter().zip(&at).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / ap.len() as f64;
    }
    let n = train.len() as f64;
    let expected = [("mel", mel / n), ("duration", dur / n), ("pitch", pitch / n), ("acoustic", acoustic / n)];
    for (name, want) in expected {
        let got = log.series("source", name);
        assert_eq!(got.len(), 1);
        assert!((got[0] - want).abs() < 1e-12, "{name}: logged {} direct {want}", got[0]);
    }
    let total: f64 = expected.iter().map(|(_, v)| v).sum();
    assert!((log.series("source", "total")[0] - total).abs() < 1e-12);
}

#[test]
fn source_training_is_bitwise_deterministic() {
    let (cfg, corpus) = setup();
    let a = source(&cfg, &corpus).to_bytes();
    let b = source(&cfg, &corpus).to_bytes();
    assert!(a == b, "two runs with one seed produced different checkpoints");
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let (cfg, corpus) = setup();
    let ckpt = aligned(&cfg, &corpus);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("aligned.ckpt");
    ckpt.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.stage, Stage::MelEncoderAligning);
    assert_eq!(loaded.to_bytes(), std::fs::read(&path).unwrap());
    assert!(loaded.changed_parameters(&ckpt).unwrap().is_empty());
}

#[test]
fn damaged_checkpoints_give_distinct_format_errors() {
    let (cfg, corpus) = setup();
    let bytes = source(&cfg, &corpus).to_bytes();
    let code = |data: &[u8]| match Checkpoint::from_bytes(data).unwrap_err() {
        Error::Format(f) => f,
        other => panic!("expected a format error, got {other}"),
    };

    let mut magic = bytes.clone();
    magic[0] ^= 0xff;
    assert!(matches!(code(&magic), FormatError::BadMagic { .. }));

    let mut version = bytes.clone();
    version[8] = version[8].wrapping_add(1);
    assert!(matches!(code(&version), FormatError::Version { .. }));

    assert!(matches!(code(&bytes[..bytes.len() / 2]), FormatError::Truncated { .. }));

    let needle = b"speaker.table";
    let at = bytes.windows(needle.len()).position(|w| w == needle).unwrap();
    let mut renamed = bytes.clone();
    renamed[at + needle.len() - 1] = b'X';
    assert!(matches!(code(&renamed), FormatError::UnknownParameter(n) if n == "speaker.tablX"));
}

#[test]
fn aligning_touches_only_the_mel_encoder() {
    let (cfg, corpus) = setup();
    let src = source(&cfg, &corpus);
    let out = align_mel_encoder(&src, &corpus, &StagePlan::align(&cfg.train), &mut MetricsLog::default()).unwrap();
    let changed = src.changed_parameters(&out).unwrap();
    assert!(!changed.is_empty());
    assert!(changed.iter().all(|n| n.starts_with("mel_encoder.")), "{changed:?}");
}

#[test]
fn adaptation_touches_only_conditional_norms_and_own_row() {
    let (cfg, corpus) = setup();
    let base = aligned(&cfg, &corpus);
    let spk = cfg.data.adaptation_speakers().next().unwrap();
    let set = corpus.strip_transcripts(spk, Split::Train).unwrap().first(4).unwrap();
    let plan = StagePlan::adapt(&cfg.train, spk);
    let out = adapt_untranscribed(&base, &set, &plan, &mut MetricsLog::default()).unwrap();
    let changed = base.changed_parameters(&out).unwrap();
    assert!(changed.contains(&"speaker.table".to_string()));
    for name in &changed {
        let group = out.model.params().get(name).unwrap().group;
        assert!(plan.trainable.contains(group), "{name} in {group}");
    }
    let (old, new) = (&base.model.params().get("speaker.table").unwrap().tensor, &out.model.params().get("speaker.table").unwrap().tensor);
    for r in 0..old.rows() {
        assert_eq!(old.row(r) == new.row(r), r != spk as usize, "row {r}");
    }
    assert_eq!(set.consumed_fields(), vec!["mel", "speaker_id"]);
}

#[test]
fn tampered_parameters_are_a_freeze_violation() {
    let (cfg, corpus) = setup();
    let src = source(&cfg, &corpus);
    let mut after = src.model.clone();
    let id = after.params().id("encoder.block0.ffn.project.kernel").unwrap();
    let x = &mut after.params_mut().tensor_mut(id).data_mut()[0];
    *x = f64::from_bits(x.to_bits() + 1);
    let err = verify_freeze(src.model.params(), after.params(), &StagePlan::align(&cfg.train)).unwrap_err();
    assert!(matches!(&err, Error::FreezeViolation { params, .. } if params == &["encoder.block0.ffn.project.kernel"]));
    assert_eq!(err.exit_code(), 3);

    let spk = 3;
    let table = after.speaker_table_id();
    let mut other_row = src.model.clone();
    other_row.params_mut().tensor_mut(table).data_mut()[0] += 0.5;
    let err = verify_freeze(src.model.params(), other_row.params(), &StagePlan::adapt(&cfg.train, spk)).unwrap_err();
    assert!(matches!(&err, Error::FreezeViolation { params, .. } if params == &["speaker.table[0]"]));
}

#[test]
fn zero_adaptation_steps_leave_the_checkpoint_unchanged() {
    let (mut cfg, corpus) = setup();
    let base = aligned(&cfg, &corpus);
    cfg.train.adapt_steps = 0;
    let spk = cfg.data.adaptation_speakers().next().unwrap();
    let set = corpus.strip_transcripts(spk, Split::Train).unwrap();
    let out = adapt_untranscribed(&base, &set, &StagePlan::adapt(&cfg.train, spk), &mut MetricsLog::default()).unwrap();
    assert!(base.changed_parameters(&out).unwrap().is_empty());
}

#[test]
fn adaptation_refuses_transcript_losses_and_foreign_rows() {
    let (cfg, corpus) = setup();
    let base = aligned(&cfg, &corpus);
    let spk = cfg.data.adaptation_speakers().next().unwrap();
    let set = corpus.strip_transcripts(spk, Split::Train).unwrap();
    let mut plan = StagePlan::adapt(&cfg.train, spk);
    plan.losses.push((LossTerm::Alignment, 1.0));
    let err = adapt_untranscribed(&base, &set, &plan, &mut MetricsLog::default()).unwrap_err();
    assert!(matches!(err, Error::Contract(_)), "{err}");

    let plan = StagePlan::adapt(&cfg.train, 0);
    let err = adapt_untranscribed(&base, &set, &plan, &mut MetricsLog::default()).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn non_finite_loss_aborts_with_last_good_checkpoint() {
    let (cfg, corpus) = setup();
    let mut src = source(&cfg, &corpus);
    let id = src.model.params().id("mel_encoder.input.weight").unwrap();
    src.model.params_mut().tensor_mut(id).data_mut()[0] = f64::NAN;
    let err = align_mel_encoder(&src, &corpus, &StagePlan::align(&cfg.train), &mut MetricsLog::default()).unwrap_err();
    assert_eq!(err.exit_code(), 4);
    match err {
        Error::Aborted { stage, step, last_good, .. } => {
            assert_eq!((stage, step), (Stage::MelEncoderAligning, 0));
            let a = last_good.model.params().tensor(id).data();
            let b = src.model.params().tensor(id).data();
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        other => panic!("expected an aborted stage, got {other}"),
    }
}

#[test]
fn synthesis_length_matches_predicted_durations() {
    let (cfg, corpus) = setup();
    let ckpt = aligned(&cfg, &corpus);
    let text = [1, 4, 2, 7, 0];
    let mel = synthesize(&ckpt, &text, 3).unwrap();
    assert_eq!(mel, synthesize(&ckpt, &text, 3).unwrap());

    let ph = PhonemeSequence::new(text.to_vec(), cfg.model.phoneme_vocab_size).unwrap();
    let mut g = Graph::inference(ckpt.model.params());
    let h = ckpt.model.encode_phonemes(&mut g, &ph).unwrap();
    let ld = ckpt.model.predict_log_durations(&mut g, h).unwrap();
    let frames = crate::backbone::round_log_durations(g.tape.value(ld).data(), cfg.model.max_duration);
    assert_eq!(mel.shape(), &[frames.iter().sum::<usize>(), cfg.model.mel_dim]);

    assert!(matches!(synthesize(&ckpt, &text, 4).unwrap_err().root(), Error::UnknownSpeaker(4)));
}

#[test]
fn variants_run_and_differ() {
    let (cfg, corpus) = setup();
    let mut ex = Experiment::new(cfg, corpus).unwrap();
    let sweep = ex.run_recipe(Recipe::DataSweep).unwrap();
    assert_eq!(sweep.sweep.iter().map(|r| r.n).collect::<Vec<_>>(), vec![1, 4]);
    assert!(sweep.sweep.iter().all(|r| r.mel_mae.is_finite() && r.speaker_proximity.is_finite()));

    let main = ex.run_variant(Variant::Main).unwrap().adapted[0].clone();
    let no_l2 = ex.run_variant(Variant::NoL2).unwrap().adapted[0].clone();
    assert!(!main.changed_parameters(&no_l2).unwrap().is_empty());

    let report = ex.run_recipe(Recipe::NoL2).unwrap();
    assert_eq!(report.paired.len(), 2);
    assert_eq!(report.paired[0].deltas.len(), ex.evaluation_set().len());
    assert!(ex.log.series("align:no_l2", "alignment").len() == ex.config().train.align_steps);
}

#[test]
fn reports_are_deterministic() {
    let run = || {
        let (cfg, corpus) = setup();
        let mut ex = Experiment::new(cfg, corpus).unwrap();
        let r = ex.run_recipe(Recipe::Main).unwrap();
        (r.metrics_csv(), r.summary(), ex.log.to_csv())
    };
    assert_eq!(run(), run());
}

#[test]
fn experiment_rejects_a_foreign_corpus() {
    let (cfg, _) = setup();
    let mut other = cfg.data.clone();
    other.seed += 1;
    let corpus = Corpus::generate(&other).unwrap();
    assert!(matches!(Experiment::new(cfg, corpus), Err(Error::Config(_))));
}
