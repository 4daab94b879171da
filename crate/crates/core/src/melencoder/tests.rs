use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::backbone::{check_param_gradients, GroupSet, TtsModel};
use crate::numerics::{GradCheckOptions, Tape};

fn tiny() -> ModelConfig {
    ModelConfig {
        hidden_dim: 8,
        n_heads: 2,
        ffn_filter: 8,
        conv_kernel: 3,
        n_encoder_blocks: 1,
        n_decoder_blocks: 1,
        n_mel_encoder_blocks: 1,
        mel_dim: 4,
        phoneme_vocab_size: 6,
        speaker_embedding_dim: 3,
        n_speakers: 3,
        acoustic_dim: 2,
        predictor_filter: 8,
        ..ModelConfig::default()
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn align(a: &Tensor, b: &Tensor, mask: &[bool]) -> (f64, Vec<f64>) {
    let model = TtsModel::new(tiny(), 0).unwrap();
    let mut g = Graph::inference(model.params());
    let mel_hidden = g.tape.leaf(a.clone().with_grad());
    let phon = g.tape.leaf(b.clone().with_grad());
    let batch = AlignmentBatch { mel_hidden, phoneme_hidden_expanded: phon, mask: mask.to_vec() };
    let loss = alignment_loss(&mut g, &batch).unwrap();
    g.tape.backward(loss).unwrap();
    assert!(g.tape.grad(phon).is_none_or(|gr| gr.iter().all(|v| *v == 0.0)));
    (g.tape.value(loss).data()[0], g.tape.grad(mel_hidden).unwrap().to_vec())
}

#[test]
fn encoder_output_shape_and_determinism() {
    let model = TtsModel::new(tiny(), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for t in [1, 9, 40] {
        let mel = rand_tensor(&mut rng, t, 4);
        let run = || {
            let mut g = Graph::inference(model.params());
            let m = g.tape.constant(mel.clone());
            let h = mel_encoder_forward(&model, &mut g, m).unwrap();
            g.tape.value(h).clone()
        };
        let h = run();
        assert_eq!(h.shape(), &[t, 8]);
        assert_eq!(h, run());
    }
    let mut g = Graph::inference(model.params());
    let wrong = g.tape.constant(Tensor::zeros(&[3, 5]));
    assert!(matches!(mel_encoder_forward(&model, &mut g, wrong), Err(Error::Shape { .. })));
}

#[test]
fn alignment_loss_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_tensor(&mut rng, 5, 3);
    assert_eq!(align(&a, &a, &[true; 5]).0, 0.0);

    let shifted = Tensor::matrix(5, 3, a.data().iter().map(|v| v + 0.3).collect()).unwrap();
    assert!((align(&shifted, &a, &[true; 5]).0 - 0.09).abs() < 1e-12);

    let b = rand_tensor(&mut rng, 5, 3);
    let mask = [true, false, true, true, false];
    let mut sum = 0.0;
    let mut count = 0;
    for r in 0..5 {
        if mask[r] {
            for c in 0..3 {
                let d = a.row(r)[c] - b.row(r)[c];
                sum += d * d;
                count += 1;
            }
        }
    }
    assert!((align(&a, &b, &mask).0 - sum / count as f64).abs() < 1e-12);
}

#[test]
fn fully_masked_alignment_is_an_error() {
    let model = TtsModel::new(tiny(), 0).unwrap();
    let mut g = Graph::inference(model.params());
    let a = g.tape.constant(Tensor::zeros(&[2, 3]));
    let batch = AlignmentBatch { mel_hidden: a, phoneme_hidden_expanded: a, mask: vec![false, false] };
    assert!(matches!(alignment_loss(&mut g, &batch), Err(Error::Contract(_))));
}

proptest! {
    #[test]
    fn alignment_loss_properties(seed in 0u64..1000, rows in 1usize..8, cols in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&mut rng, rows, cols);
        let b = rand_tensor(&mut rng, rows, cols);
        let mut mask: Vec<bool> = (0..rows).map(|_| rng.random_bool(0.7)).collect();
        mask[0] = true;

        let (ab, grad) = align(&a, &b, &mask);
        let (ba, _) = align(&b, &a, &mask);
        prop_assert!(ab > 0.0);
        prop_assert_eq!(ab.to_bits(), ba.to_bits());
        prop_assert_eq!(align(&a, &a, &mask).0, 0.0);

        // Appending masked padding frames changes neither loss nor gradient.
        let pad: Vec<f64> = (0..3 * cols).map(|_| rng.random_range(-5.0..5.0)).collect();
        let extend = |t: &Tensor| {
            let mut d = t.data().to_vec();
            d.extend_from_slice(&pad);
            Tensor::matrix(rows + 3, cols, d).unwrap()
        };
        let padded_b = Tensor::matrix(rows + 3, cols, {
            let mut d = b.data().to_vec();
            d.extend(std::iter::repeat_n(0.0, 3 * cols));
            d
        }).unwrap();
        let mut padded_mask = mask.clone();
        padded_mask.extend([false; 3]);
        let (loss2, grad2) = align(&extend(&a), &padded_b, &padded_mask);
        prop_assert_eq!(ab.to_bits(), loss2.to_bits());
        prop_assert_eq!(&grad[..], &grad2[..rows * cols]);
        prop_assert!(grad2[rows * cols..].iter().all(|v| *v == 0.0));
    }
}

#[test]
fn alignment_loss_gradient_check() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (r, c) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let a = rand_tensor(&mut rng, r, c);
        let b = rand_tensor(&mut rng, r, c);
        let mut mask: Vec<bool> = (0..r).map(|_| rng.random_bool(0.6)).collect();
        mask[r - 1] = true;
        let report = crate::numerics::grad_check(
            |t: &mut Tape, v| {
                let target = t.constant(b.clone());
                t.masked_mean_sq_diff(v[0], target, &mask)
            },
            &[a],
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }
}

const OPTS: GradCheckOptions = GradCheckOptions { h: 1e-5, tol: 1e-4, floor: 1e-3, max_coords: Some(6) };

#[test]
fn mel_encoder_and_alignment_gradients() {
    let cfg = tiny();
    let groups = GroupSet::EMPTY.with(ParameterGroup::MelEncoder);
    for seed in 0..3 {
        let model = TtsModel::new(cfg.clone(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(50 + seed);
        let t = rng.random_range(2..=8);
        let mel = rand_tensor(&mut rng, t, 4);
        let target = rand_tensor(&mut rng, t, 8);
        let r = check_param_gradients(
            &model,
            groups,
            |m, g| {
                let x = g.tape.constant(mel.clone());
                let h = mel_encoder_forward(m, g, x)?;
                let p = g.tape.constant(target.clone());
                let batch = AlignmentBatch::unpadded(g, h, p);
                alignment_loss(g, &batch)
            },
            OPTS,
        )
        .unwrap();
        assert!(r.passed, "{r:?} at {}", model.params().entries()[r.worst.0].name);
    }
}

#[test]
fn reconstruction_gradients_through_decoder() {
    let cfg = tiny();
    let groups = GroupSet::EMPTY
        .with(ParameterGroup::MelEncoder)
        .with(ParameterGroup::ConditionalLN)
        .with(ParameterGroup::DecoderCore)
        .with(ParameterGroup::PitchPredictor)
        .with(ParameterGroup::AcousticCondition)
        .with(ParameterGroup::SpeakerTable);
    for seed in 0..3 {
        let model = TtsModel::new(cfg.clone(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(60 + seed);
        let t = rng.random_range(2..=8);
        let mel = rand_tensor(&mut rng, t, 4);
        let r = check_param_gradients(
            &model,
            groups,
            |m, g| {
                let out = reconstruction_forward(m, g, &mel, 1)?;
                let target = g.tape.constant(mel.clone());
                g.tape.mean_sq_diff(out.mel, target)
            },
            OPTS,
        )
        .unwrap();
        assert!(r.passed, "{r:?} at {}", model.params().entries()[r.worst.0].name);
    }
}

#[test]
fn reconstruction_preserves_shape() {
    let model = TtsModel::new(tiny(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mel = rand_tensor(&mut rng, 11, 4);
    let mut g = Graph::inference(model.params());
    let out = reconstruction_forward(&model, &mut g, &mel, 2).unwrap();
    assert_eq!(g.tape.value(out.mel).shape(), mel.shape());
    assert_eq!(g.tape.value(out.mel_hidden).shape(), &[11, 8]);
    assert_eq!(g.tape.value(out.conditions.pitch).shape(), &[11]);
}

#[test]
fn aligning_gradients_stay_in_mel_encoder() {
    let model = TtsModel::new(tiny(), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mel = rand_tensor(&mut rng, 6, 4);
    let target = rand_tensor(&mut rng, 6, 8);
    let mut g = Graph::new(model.params(), GroupSet::EMPTY.with(ParameterGroup::MelEncoder));
    let out = reconstruction_forward(&model, &mut g, &mel, 0).unwrap();
    let t = g.tape.constant(mel.clone());
    let rec = g.tape.mean_abs_diff(out.mel, t).unwrap();
    let p = g.tape.constant(target);
    let batch = AlignmentBatch::unpadded(&g, out.mel_hidden, p);
    let al = alignment_loss(&mut g, &batch).unwrap();
    let loss = g.tape.add(rec, al).unwrap();
    g.tape.backward(loss).unwrap();
    let grads = g.param_grads();
    assert!(!grads.is_empty());
    for (id, _) in grads {
        assert_eq!(model.params().entry(id).group, ParameterGroup::MelEncoder);
    }
}
