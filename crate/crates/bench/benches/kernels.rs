use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use germ_core::attention::softmax1;
use germ_core::linalg::svd;
use germ_core::quant::{fake_quant, Range};
use germ_core::{AttentionVariant, Model, ModelConfig, Rng};

fn kernels(c: &mut Criterion) {
    let mut rng = Rng::new(0);
    let a = rng.normal_tensor(&[64, 64], 1.0);
    let b = rng.normal_tensor(&[64, 64], 1.0);
    c.bench_function("matmul_64", |bench| bench.iter(|| black_box(&a).matmul(black_box(&b)).unwrap()));
    let w = rng.normal_tensor(&[32, 32], 1.0);
    c.bench_function("svd_32", |bench| bench.iter(|| svd(black_box(&w)).unwrap()));
    let scores: Vec<f64> = rng.normal_tensor(&[128], 3.0).data().to_vec();
    c.bench_function("softmax1_128", |bench| bench.iter(|| softmax1(black_box(&scores))));
    let range = [Range::symmetric(a.max_abs())];
    c.bench_function("fake_quant_64x64_int8", |bench| bench.iter(|| fake_quant(black_box(&a), 8, &range, true).unwrap()));

    let model = Model::init(ModelConfig::toy(AttentionVariant::Softmax1), &mut rng, 0.02).unwrap();
    let tokens: Vec<usize> = (0..model.config.max_seq_len).map(|i| 5 + i % 40).collect();
    c.bench_function("forward_toy", |bench| bench.iter(|| model.forward(black_box(&tokens)).unwrap()));
}

criterion_group!(benches, kernels);
criterion_main!(benches);
