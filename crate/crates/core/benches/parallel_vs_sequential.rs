//! Compares the rayon-backed batch kernels against their always-sequential
//! twins in a single build. With default features the `parallel` variants
//! use the rayon pool; with `--no-default-features` both variants run the
//! same sequential code and should tie.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cgcd_core::clustering::{similarity_matrix, similarity_matrix_seq};
use cgcd_core::embedding::{normalize, Activation, EmbeddingModel, Proxy, ProxyOrigin, ProxySet};
use cgcd_core::evt::{fit_all_proxies, fit_all_proxies_seq, PsiClassifier, WeibullParams};

fn random_points(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            normalize(&v)
        })
        .collect()
}

fn bench_embed(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = EmbeddingModel::new_random(vec![32, 64, 16], Activation::Tanh, &mut rng).unwrap();
    let mut group = c.benchmark_group("embed_batch");
    for &n in &[64usize, 512] {
        let xs = random_points(n, 32, 2);
        group.bench_with_input(BenchmarkId::new("parallel", n), &xs, |b, xs| {
            b.iter(|| model.embed_batch(xs).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("sequential", n), &xs, |b, xs| {
            b.iter(|| model.embed_batch_seq(xs).unwrap())
        });
    }
    group.finish();
}

fn classifier(proxy_count: usize, dim: usize) -> PsiClassifier {
    let vectors = random_points(proxy_count, dim, 3);
    let proxies = ProxySet::new(
        vectors
            .into_iter()
            .enumerate()
            .map(|(i, v)| Proxy::new(v, i, ProxyOrigin::Initial))
            .collect(),
        proxy_count,
    )
    .unwrap();
    let w = WeibullParams {
        shape: 2.0,
        scale: 0.4,
        tail_size_used: 10,
    };
    PsiClassifier::new(proxies, vec![w; proxy_count], 0.75).unwrap()
}

fn bench_classify(c: &mut Criterion) {
    let clf = classifier(16, 16);
    let points = random_points(512, 16, 4);
    let mut group = c.benchmark_group("classify_batch");
    group.bench_function("parallel", |b| b.iter(|| clf.classify_batch(&points)));
    group.bench_function("sequential", |b| b.iter(|| clf.classify_batch_seq(&points)));
    group.finish();
}

fn bench_weibull_fit(c: &mut Criterion) {
    let clf = classifier(12, 16);
    let points = random_points(600, 16, 5);
    let labels: Vec<usize> = (0..points.len()).map(|i| i % 12).collect();
    let mut group = c.benchmark_group("fit_all_proxies");
    group.bench_function("parallel", |b| {
        b.iter(|| fit_all_proxies(&clf.proxies, &points, &labels, 50).unwrap())
    });
    group.bench_function("sequential", |b| {
        b.iter(|| fit_all_proxies_seq(&clf.proxies, &points, &labels, 50).unwrap())
    });
    group.finish();
}

fn bench_similarity(c: &mut Criterion) {
    let points = random_points(256, 16, 6);
    let mut group = c.benchmark_group("similarity_matrix");
    group.bench_function("parallel", |b| b.iter(|| similarity_matrix(&points)));
    group.bench_function("sequential", |b| b.iter(|| similarity_matrix_seq(&points)));
    group.finish();
}

criterion_group!(
    benches,
    bench_embed,
    bench_classify,
    bench_weibull_fit,
    bench_similarity
);
criterion_main!(benches);
