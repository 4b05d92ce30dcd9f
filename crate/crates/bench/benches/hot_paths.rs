//! Criterion benchmarks for the training and evaluation hot paths at the
//! default benchmark scale (64 rows x 32 dims, 8 heads).

use criterion::{black_box, criterion_group, criterion_main, Criterion};
use ndarray::Array2;

use reinpool_core::policy::{self, PolicyParams};
use reinpool_core::pooling::{pool, KeepMask, PoolKind};
use reinpool_core::reward::{ndcg_at_k, RankedList};
use reinpool_core::rng::StreamRng;
use reinpool_core::store::MultiVectorDoc;
use reinpool_core::{score_full_multivector, similarity};

const ROWS: usize = 64;
const DIM: usize = 32;

fn fixture_matrix(seed: u64) -> Array2<f32> {
    let mut rng = StreamRng::derive(seed, "bench.matrix", &[]);
    Array2::from_shape_fn((ROWS, DIM), |_| (rng.uniform() * 2.0 - 1.0) as f32)
}

fn fixture_params(seed: u64) -> PolicyParams {
    PolicyParams::init(DIM, 8, &mut StreamRng::derive(seed, "bench.params", &[])).unwrap()
}

fn bench_policy(c: &mut Criterion) {
    let params = fixture_params(1);
    let x = fixture_matrix(2);
    c.bench_function("policy_forward_64x32", |b| {
        b.iter(|| policy::forward(&params, black_box(x.view())).unwrap())
    });

    let out = policy::forward(&params, x.view()).unwrap();
    let mut rng = StreamRng::derive(3, "bench.masks", &[]);
    let masks: Vec<KeepMask> = (0..8)
        .map(|_| policy::sample_mask(&out, &mut rng).0)
        .collect();
    let coeffs: Vec<f64> = (0..8).map(|i| (i as f64 - 3.5) / 8.0).collect();
    c.bench_function("policy_backward_group8", |b| {
        b.iter(|| policy::backward(&params, &out, black_box(&masks), black_box(&coeffs)).unwrap())
    });

    c.bench_function("policy_sample_mask", |b| {
        let mut rng = StreamRng::derive(4, "bench.sample", &[]);
        b.iter(|| policy::sample_mask(&out, &mut rng))
    });
}

fn bench_pooling(c: &mut Criterion) {
    let x = fixture_matrix(5);
    let mut rng = StreamRng::derive(6, "bench.mask", &[]);
    let mask = KeepMask::new((0..ROWS).map(|_| rng.uniform() < 0.3).collect());
    c.bench_function("pool_mean_64x32", |b| {
        b.iter(|| pool(black_box(x.view()), &mask, PoolKind::Mean).unwrap())
    });
    c.bench_function("pool_max_64x32", |b| {
        b.iter(|| pool(black_box(x.view()), &mask, PoolKind::Max).unwrap())
    });
}

fn bench_scoring(c: &mut Criterion) {
    let doc = MultiVectorDoc::new("d", fixture_matrix(7)).unwrap();
    let mut rng = StreamRng::derive(8, "bench.query", &[]);
    let q = ndarray::Array1::from_shape_fn(DIM, |_| rng.uniform() * 2.0 - 1.0);
    c.bench_function("late_interaction_score_64x32", |b| {
        b.iter(|| score_full_multivector(black_box(q.view()), &doc).unwrap())
    });

    let q2 = ndarray::Array1::from_shape_fn(DIM, |_| rng.uniform() * 2.0 - 1.0);
    c.bench_function("dot_32", |b| {
        b.iter(|| similarity(black_box(q.view()), black_box(q2.view())).unwrap())
    });
}

fn bench_ndcg(c: &mut Criterion) {
    let mut rng = StreamRng::derive(9, "bench.ndcg", &[]);
    let scored: Vec<(String, f64)> = (0..768)
        .map(|i| (format!("q{i:04}"), rng.uniform()))
        .collect();
    let relevant: std::collections::BTreeMap<String, u32> =
        (0..4).map(|i| (format!("q{:04}", i * 100), 1)).collect();
    c.bench_function("rank_and_ndcg_768", |b| {
        b.iter(|| {
            let ranking = RankedList::from_scores(black_box(scored.clone())).unwrap();
            ndcg_at_k(&ranking, &relevant, 3)
        })
    });
}

criterion_group!(
    benches,
    bench_policy,
    bench_pooling,
    bench_scoring,
    bench_ndcg
);
criterion_main!(benches);
