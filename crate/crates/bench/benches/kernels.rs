use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use dpfl_core::data::generate_synthetic;
use dpfl_core::nn::init_params;
use dpfl_core::optim::{sam_step, OptimizerConfig, OptimizerState};
use dpfl_core::privacy::{add_dp_noise, clip_update, rdp_binomial, rdp_quadrature, PrivacySpec};
use dpfl_core::{MlpArchitecture, Objective, ParameterVector};

fn nn(c: &mut Criterion) {
    let arch = MlpArchitecture::relu(&[20, 32, 10]).unwrap();
    let data = generate_synthetic(10, 20, 32, 3.0, 0).unwrap().to_batch();
    let w = init_params(&arch, 0);
    c.bench_function("loss_and_grad/20-32-10/b32", |b| {
        b.iter(|| arch.loss_and_grad(black_box(&w), &data).unwrap())
    });
    let config = OptimizerConfig::default();
    c.bench_function("sam_step/20-32-10/b32", |b| {
        b.iter(|| {
            let mut state = OptimizerState::new(arch.num_params(), config, 0);
            sam_step(&arch, black_box(&w), &mut state, &data).unwrap()
        })
    });
}

fn privacy(c: &mut Criterion) {
    c.bench_function("rdp_binomial/q0.1/s0.95/a32", |b| {
        b.iter(|| rdp_binomial(black_box(0.1), 0.95, 32).unwrap())
    });
    c.bench_function("rdp_quadrature/q0.1/s0.95/a2.5", |b| {
        b.iter(|| rdp_quadrature(black_box(0.1), 0.95, 2.5).unwrap())
    });
    let spec = PrivacySpec::new(0.2, 0.95, 0.1, 1.0 / 500.0, 500).unwrap();
    let delta = ParameterVector::new((0..10_000).map(|i| (i as f64).sin()).collect());
    c.bench_function("clip_and_noise/d10000", |b| {
        b.iter(|| {
            let clipped = clip_update(black_box(&delta), spec.clip()).clipped;
            add_dp_noise(&clipped, &spec, 7)
        })
    });
}

criterion_group!(benches, nn, privacy);
criterion_main!(benches);
