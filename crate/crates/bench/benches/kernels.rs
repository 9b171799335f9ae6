use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use histaug::fid::{compute_fid, MomentSummary};
use histaug::nn::{attention_forward, AttentionParams};
use histaug::selector::{apply_filters, scored_pool};
use histaug::Tensor;

fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn summary(rng: &mut ChaCha8Rng, dim: usize) -> MomentSummary {
    let a = DMatrix::from_vec(dim, dim, random(rng, dim * dim));
    MomentSummary {
        mean: DVector::from_vec(random(rng, dim)),
        covariance: &a * a.transpose() / dim as f64,
        sample_count: 256,
    }
}

fn fid(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (a, b) = (summary(&mut rng, 64), summary(&mut rng, 64));
    c.bench_function("compute_fid_64", |bench| bench.iter(|| compute_fid(black_box(&a), black_box(&b)).unwrap()));
}

fn filters(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 4000;
    let labels: Vec<usize> = (0..n).map(|i| i % 4).collect();
    let entropies = random(&mut rng, n);
    let distances = random(&mut rng, n);
    let pool = scored_pool(&labels, &entropies, &distances);
    c.bench_function("selection_filters_4000", |bench| {
        bench.iter(|| {
            let mut p = pool.clone();
            apply_filters(black_box(&mut p), None).unwrap()
        })
    });
}

fn attention(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (b, ch, h) = (8, 32, 16);
    let x = Tensor::new(random(&mut rng, b * ch * h * h), &[b, ch, h, h]);
    let w_q = Tensor::new(random(&mut rng, 4 * ch), &[4, ch]);
    let w_k = Tensor::new(random(&mut rng, 4 * ch), &[4, ch]);
    let w_v = Tensor::new(random(&mut rng, ch * ch), &[ch, ch]);
    let gamma = Tensor::new(vec![0.5], &[]);
    let params = AttentionParams { w_q: &w_q, w_k: &w_k, w_v: &w_v, gamma: &gamma };
    c.bench_function("attention_forward_8x32x16x16", |bench| {
        bench.iter(|| attention_forward(black_box(&x), &params).unwrap())
    });
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Tensor::new(random(&mut rng, 16 * 16 * 32 * 32), &[16, 16, 32, 32]);
    let w = Tensor::new(random(&mut rng, 32 * 16 * 9), &[32, 16, 3, 3]);
    c.bench_function("conv3x3_16x16x32x32", |bench| bench.iter(|| black_box(&x).conv2d(&w, 1, 1)));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = fid, filters, attention, conv
}
criterion_main!(benches);
