use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use melbridge::numerics::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul_forward_backward");
    for &d in &[32usize, 64, 128] {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&mut rng, &[200, d]);
        let b = random(&mut rng, &[d, d]);
        group.bench_with_input(BenchmarkId::from_parameter(d), &d, |bench, _| {
            bench.iter(|| {
                let mut t = Tape::new();
                let (x, w) = (t.leaf(a.clone().with_grad()), t.leaf(b.clone().with_grad()));
                let y = t.matmul(x, w).unwrap();
                let s = t.sum(y);
                t.backward(s).unwrap();
            })
        });
    }
    group.finish();
}

fn conv1d(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&mut rng, &[200, 64]);
    let k = random(&mut rng, &[9, 64, 64]);
    c.bench_function("conv1d_k9_forward_backward", |bench| {
        bench.iter(|| {
            let mut t = Tape::new();
            let (xv, kv) = (t.leaf(x.clone().with_grad()), t.leaf(k.clone().with_grad()));
            let y = t.conv1d(xv, kv).unwrap();
            let s = t.sum(y);
            t.backward(s).unwrap();
        })
    });
}

fn attention_scores(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let q = random(&mut rng, &[200, 32]);
    c.bench_function("softmax_attention_200x200", |bench| {
        bench.iter(|| {
            let mut t = Tape::new();
            let qv = t.leaf(q.clone().with_grad());
            let kt = t.transpose(qv).unwrap();
            let scores = t.matmul(qv, kt).unwrap();
            let p = t.softmax(scores, 1).unwrap();
            let out = t.matmul(p, qv).unwrap();
            let s = t.sum(out);
            t.backward(s).unwrap();
        })
    });
}

criterion_group!(benches, matmul, conv1d, attention_scores);
criterion_main!(benches);
