use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(1..=8)
}

fn check(f: impl Fn(&mut Tape, &[Var]) -> crate::Result<Var>, inputs: &[Tensor], what: &str) {
    let r = grad_check(f, inputs, GradCheckOptions::default()).unwrap();
    assert!(r.passed, "{what}: {r:?}");
}

#[test]
fn matmul_identity_and_hand_example() {
    let mut tape = Tape::new();
    let eye = tape.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let x = tape.constant(Tensor::matrix(2, 3, vec![1.0, -2.0, 3.5, 0.25, 9.0, -7.0]).unwrap());
    let y = tape.matmul(eye, x).unwrap();
    assert_eq!(tape.value(y), tape.value(x));

    let a = tape.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let b = tape.constant(Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap());
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
    assert_eq!(tape.value(c).shape(), &[2, 1]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let msg = tape.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3] x [2, 3]"), "{msg}");
}

#[test]
fn matmul_sum_gradient_is_row_sums_of_b() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = rand_tensor(&mut rng, &[3, 4]).with_grad();
    let b = rand_tensor(&mut rng, &[4, 5]);
    let mut tape = Tape::new();
    let va = tape.leaf(a.clone());
    let vb = tape.constant(b.clone());
    let c = tape.matmul(va, vb).unwrap();
    let s = tape.sum(c);
    tape.backward(s).unwrap();
    let g = tape.grad(va).unwrap();

    // Central differences, independent of the tape's backward pass.
    let f = |a: &Tensor| -> f64 {
        let mut t = Tape::new();
        let (x, y) = (t.constant(a.clone()), t.constant(b.clone()));
        let c = t.matmul(x, y).unwrap();
        t.value(c).data().iter().sum()
    };
    let h = 1e-5;
    for i in 0..3 {
        for k in 0..4 {
            let row_sum: f64 = b.row(k).iter().sum();
            let mut p = a.clone();
            p.data_mut()[i * 4 + k] += h;
            let mut m = a.clone();
            m.data_mut()[i * 4 + k] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            assert!((g[i * 4 + k] - row_sum).abs() < 1e-12);
            assert!((fd - row_sum).abs() < 1e-8, "{fd} vs {row_sum}");
        }
    }
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![0.0, 0.0, 0.0]).unwrap());
    let y = tape.softmax(x, 0).unwrap();
    for v in tape.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    let x = tape.constant(Tensor::vector(vec![1000.0, 0.0, 0.0]).unwrap());
    let y = tape.softmax(x, 0).unwrap();
    let out = tape.value(y).data();
    assert!(out.iter().all(|v| v.is_finite()));
    assert!((out[0] - 1.0).abs() < 1e-300_f64.max(1e-15));
    assert!(out[1] < 1e-300);

    // Scalar oracle: e^i / (e^1 + e^2 + e^3), evaluated term by term.
    let x = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap());
    let y = tape.softmax(x, 0).unwrap();
    let denom = 1f64.exp() + 2f64.exp() + 3f64.exp();
    for (i, v) in tape.value(y).data().iter().enumerate() {
        let expect = ((i + 1) as f64).exp() / denom;
        assert!((v - expect).abs() < 1e-15, "{v} vs {expect}");
    }
}

#[test]
fn softmax_rejects_bad_axis() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[2, 2]));
    assert!(matches!(tape.softmax(x, 2), Err(Error::Shape { .. })));
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::new();
    let ones = tape.constant(Tensor::full(&[4], 1.0));
    let zeros = tape.constant(Tensor::zeros(&[4]));
    let x = tape.constant(Tensor::matrix(2, 4, vec![3.0; 8]).unwrap());
    let y = tape.layer_norm(x, ones, zeros, 1e-5).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

    let b = tape.constant(Tensor::vector(vec![0.5, -1.0, 2.0, 0.0]).unwrap());
    let g0 = tape.constant(Tensor::zeros(&[4]));
    let x = tape.constant(Tensor::matrix(2, 4, vec![1.0, 5.0, -3.0, 2.0, 0.1, 0.2, 0.3, 0.4]).unwrap());
    let y = tape.layer_norm(x, g0, b, 1e-5).unwrap();
    for r in 0..2 {
        assert_eq!(tape.value(y).row(r), &[0.5, -1.0, 2.0, 0.0]);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = tape.constant(rand_tensor(&mut rng, &[4, 8]));
    let n = tape.normalize(x, 1e-12).unwrap();
    for r in 0..4 {
        let row = tape.value(n).row(r);
        let mean = row.iter().sum::<f64>() / 8.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-6);
    }
}

#[test]
fn layer_norm_requires_positive_eps() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 3]));
    assert!(matches!(tape.normalize(x, 0.0), Err(Error::Config(_))));
}

#[test]
fn conv1d_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
    let eye = tape.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let y = tape.conv1d(x, eye).unwrap();
    assert_eq!(tape.value(y), tape.value(x));

    let zero = tape.constant(Tensor::zeros(&[5, 2, 3]));
    let y = tape.conv1d(x, zero).unwrap();
    assert_eq!(tape.value(y).shape(), &[3, 3]);
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

    // Three-tap moving average over a ramp; borders see zero padding.
    let ramp = tape.constant(Tensor::matrix(5, 1, vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap());
    let avg = tape.constant(Tensor::new(vec![3, 1, 1], vec![1.0 / 3.0; 3]).unwrap());
    let y = tape.conv1d(ramp, avg).unwrap();
    let expect = [1.0, 2.0, 3.0, 4.0, 3.0];
    for (v, e) in tape.value(y).data().iter().zip(expect) {
        assert!((v - e).abs() < 1e-14, "{v} vs {e}");
    }
}

#[test]
fn conv1d_rejects_even_kernel() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[4, 2]));
    let k = tape.constant(Tensor::zeros(&[2, 2, 2]));
    assert!(matches!(tape.conv1d(x, k), Err(Error::Config(_))));
}

#[test]
fn backward_analytic_cases() {
    let x0 = Tensor::vector(vec![0.5, -1.0, 3.0]).unwrap().with_grad();

    let mut tape = Tape::new();
    let x = tape.leaf(x0.clone());
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

    let mut tape = Tape::new();
    let x = tape.leaf(x0.clone());
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0, -2.0, 6.0]);

    // x feeds two consumers: gradients add.
    let mut tape = Tape::new();
    let x = tape.leaf(x0);
    let a = tape.sum(x);
    let sq = tape.mul(x, x).unwrap();
    let b = tape.sum(sq);
    let loss = tape.add(a, b).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0, -1.0, 7.0]);
}

#[test]
fn backward_leaves_non_ancestors_untouched() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap().with_grad());
    let unrelated = tape.leaf(Tensor::vector(vec![3.0, 4.0]).unwrap().with_grad());
    let other = tape.sum(unrelated);
    let loss = tape.sum(x);
    tape.backward(loss).unwrap();
    assert!(tape.grad(unrelated).is_none());
    assert!(tape.grad(other).is_none());
    assert!(tape.grad(x).is_some());
}

#[test]
fn backward_requires_scalar_loss() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap().with_grad());
    assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
}

#[test]
fn detached_values_stop_gradients() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap().with_grad());
    let d = tape.detach(x);
    let p = tape.mul(x, d).unwrap();
    let s = tape.sum(p);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0, 2.0]);
}

#[test]
fn dropout_zero_rate_is_identity_and_rescales_otherwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[4, 4], 2.0));
    assert_eq!(tape.dropout(x, 0.0, &mut rng).unwrap(), x);
    let y = tape.dropout(x, 0.5, &mut rng).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0 || v == 4.0));
    assert!(tape.dropout(x, 1.0, &mut rng).is_err());
}

/// Every differentiable operator against central differences over 20 seeds
/// with random extents up to 8.
#[test]
fn operator_gradients_match_finite_differences() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let (m, k, n) = (dim(&mut rng), dim(&mut rng), dim(&mut rng));
        let a = rand_tensor(&mut rng, &[m, k]);
        let b = rand_tensor(&mut rng, &[k, n]);
        let w = rand_tensor(&mut rng, &[m, n]);
        let weighted = |t: &mut Tape, y: Var, w: &Tensor| -> crate::Result<Var> {
            let wv = t.constant(w.clone());
            let p = t.mul(y, wv)?;
            Ok(t.sum(p))
        };

        check(|t, v| { let y = t.matmul(v[0], v[1])?; weighted(t, y, &w) }, &[a.clone(), b.clone()], "matmul");
        let wt = rand_tensor(&mut rng, &[k, m]);
        check(|t, v| { let y = t.transpose(v[0])?; weighted(t, y, &wt) }, &[a.clone()], "transpose");

        let a2 = rand_tensor(&mut rng, &[m, k]);
        let wk = rand_tensor(&mut rng, &[m, k]);
        check(|t, v| { let y = t.add(v[0], v[1])?; weighted(t, y, &wk) }, &[a.clone(), a2.clone()], "add");
        check(|t, v| { let y = t.sub(v[0], v[1])?; weighted(t, y, &wk) }, &[a.clone(), a2.clone()], "sub");
        check(|t, v| { let y = t.mul(v[0], v[1])?; weighted(t, y, &wk) }, &[a.clone(), a2.clone()], "mul");

        let row = rand_tensor(&mut rng, &[k]);
        check(|t, v| { let y = t.add_row(v[0], v[1])?; weighted(t, y, &wk) }, &[a.clone(), row.clone()], "add_row");
        check(|t, v| { let y = t.mul_row(v[0], v[1])?; weighted(t, y, &wk) }, &[a.clone(), row.clone()], "mul_row");
        check(|t, v| { let y = t.scale(v[0], -1.7); weighted(t, y, &wk) }, &[a.clone()], "scale");
        check(|t, v| { let y = t.relu(v[0]); weighted(t, y, &wk) }, &[a.clone()], "relu");
        check(|t, v| { let y = t.softmax(v[0], 1)?; weighted(t, y, &wk) }, &[a.clone()], "softmax rows");
        check(|t, v| { let y = t.softmax(v[0], 0)?; weighted(t, y, &wk) }, &[a.clone()], "softmax cols");
        check(|t, v| { let y = t.normalize(v[0], 1e-5)?; weighted(t, y, &wk) }, &[a.clone()], "normalize");
        check(
            |t, v| { let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?; weighted(t, y, &wk) },
            &[a.clone(), row.clone(), rand_tensor(&mut rng, &[k])],
            "layer_norm",
        );

        let taps = [1, 3, 5, 7][rng.random_range(0..4)];
        let kernel = rand_tensor(&mut rng, &[taps, k, n]);
        check(|t, v| { let y = t.conv1d(v[0], v[1])?; weighted(t, y, &w) }, &[a.clone(), kernel], "conv1d");

        let start = rng.random_range(0..k);
        let end = rng.random_range(start + 1..=k);
        let ws = rand_tensor(&mut rng, &[m, end - start]);
        check(|t, v| { let y = t.slice_cols(v[0], start, end)?; weighted(t, y, &ws) }, &[a.clone()], "slice_cols");
        let wc = rand_tensor(&mut rng, &[m, k + n]);
        check(|t, v| { let y = t.concat_cols(&[v[0], v[1]])?; weighted(t, y, &wc) }, &[a.clone(), w.clone()], "concat_cols");

        let index: Vec<usize> = (0..dim(&mut rng)).map(|_| rng.random_range(0..m)).collect();
        let wg = rand_tensor(&mut rng, &[index.len(), k]);
        check(|t, v| { let y = t.gather_rows(v[0], &index)?; weighted(t, y, &wg) }, &[a.clone()], "gather_rows");

        let mut lengths = vec![0usize; rng.random_range(1..=m)];
        for _ in 0..m {
            let s = rng.random_range(0..lengths.len());
            lengths[s] += 1;
        }
        let wm = rand_tensor(&mut rng, &[lengths.len(), k]);
        check(|t, v| { let y = t.segment_mean(v[0], &lengths)?; weighted(t, y, &wm) }, &[a.clone()], "segment_mean");
        check(|t, v| { let y = t.reshape(v[0], &[m * k])?; let f = t.reshape(y, &[m, k])?; weighted(t, f, &wk) }, &[a.clone()], "reshape");
        check(|t, v| Ok(t.mean(v[0])), &[a.clone()], "mean");
        check(|t, v| t.mean_sq_diff(v[0], v[1]), &[a.clone(), a2.clone()], "mean_sq_diff");
        check(|t, v| t.mean_abs_diff(v[0], v[1]), &[a.clone(), a2.clone()], "mean_abs_diff");
        let mut mask: Vec<bool> = (0..m).map(|_| rng.random_bool(0.7)).collect();
        mask[0] = true;
        check(|t, v| { let b = t.constant(a2.clone()); t.masked_mean_sq_diff(v[0], b, &mask) }, &[a.clone()], "masked_mean_sq_diff");
    }
}

proptest! {
    #[test]
    fn softmax_normalizes_and_ignores_shifts(
        rows in 1usize..5,
        cols in 1usize..8,
        seed in any::<u64>(),
        shift in -50.0f64..50.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-20.0..20.0)).collect()).unwrap();
        let shifted = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v + shift).collect()).unwrap();
        let mut tape = Tape::new();
        let (a, b) = (tape.constant(x), tape.constant(shifted));
        let (ya, yb) = (tape.softmax(a, 1).unwrap(), tape.softmax(b, 1).unwrap());
        for r in 0..rows {
            let s: f64 = tape.value(ya).row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(tape.value(ya).row(r).iter().all(|&v| v > 0.0));
        }
        prop_assert!(tape.value(ya).max_abs_diff(tape.value(yb)) < 1e-9);
    }
}
