use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use mcrecon::baselines::{cstv_reconstruct, CsTvConfig};
use mcrecon::eval::make_samples;
use mcrecon::kspace::{fft2c, ifft2c};
use mcrecon::model::{dcct_forward, swintl_forward, FeatureMap};
use mcrecon::phantom::simulate_dataset;
use mcrecon::{Contrast, ModelConfig, ModelWeights};
use ndarray::Array2;

fn kernels(c: &mut Criterion) {
    let data = simulate_dataset(1, 1, 64, 64, 0).unwrap();
    let sample = make_samples(&data, &[0], Contrast::T2, 4.0, 0.04, 0).unwrap().remove(0);
    let gt = sample.x_gt.clone().unwrap();

    c.bench_function("fft2c+ifft2c 64x64", |b| b.iter(|| ifft2c(&fft2c(black_box(&gt)))));

    let cfg = ModelConfig::small();
    let weights = ModelWeights::init(&cfg, 0).unwrap();
    let layer = &weights.networks[0].blocks[0].layers[0];
    let features = FeatureMap::new(
        64,
        64,
        Array2::from_shape_fn((64 * 64, cfg.embed_dim), |(i, j)| ((i * 31 + j * 7) % 97) as f64 / 97.0 - 0.5),
    )
    .unwrap();
    c.bench_function("swintl shifted 64x64 C16", |b| {
        b.iter(|| swintl_forward(black_box(&features), layer, true).unwrap())
    });

    c.bench_function("dcct forward small 64x64", |b| {
        b.iter(|| dcct_forward(&sample.y_tag, &sample.m_tag, &sample.x_ref, &cfg, black_box(&weights)).unwrap())
    });

    let cstv = CsTvConfig { max_iters: 50, ..CsTvConfig::default() };
    let mut group = c.benchmark_group("baselines");
    group.sample_size(10);
    group.bench_function("cstv 50 iters 64x64", |b| {
        b.iter(|| cstv_reconstruct(black_box(&sample.y_tag), &sample.m_tag, &cstv).unwrap())
    });
    group.finish();
}

criterion_group!(benches, kernels);
criterion_main!(benches);
