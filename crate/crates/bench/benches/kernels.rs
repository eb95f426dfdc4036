use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

use tasksod::ops::{self, ConvGeom};

fn random(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array4::from_shape_simple_fn(shape, || rng.random_range(-1.0..1.0))
}

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv3x3");
    for &(ch, h, w) in &[(16, 32, 64), (64, 8, 16), (64, 32, 64)] {
        let x = random((1, ch, h, w), 1);
        let weight = random((ch, ch, 3, 3), 2);
        let bias = random((1, ch, 1, 1), 3);
        for dilation in [1, 4] {
            let geom = ConvGeom::same(3, 1, dilation);
            group.bench_with_input(
                BenchmarkId::new(format!("d{dilation}"), format!("{ch}x{h}x{w}")),
                &geom,
                |b, &geom| b.iter(|| ops::conv2d(black_box(&x), &weight, Some(&bias), geom).unwrap()),
            );
        }
    }
    group.finish();

    let x = random((1, 64, 16, 32), 4);
    let weight = random((64, 64, 3, 3), 5);
    let geom = ConvGeom::same(3, 1, 1);
    let y = ops::conv2d(&x, &weight, None, geom).unwrap();
    c.bench_function("conv3x3_backward/64x16x32", |b| {
        b.iter(|| ops::conv2d_backward(black_box(&x), &weight, black_box(&y), geom))
    });
}

fn softmax_and_norm(c: &mut Criterion) {
    let x = random((1, 64, 32, 64), 6);
    c.bench_function("spatial_softmax/64x32x64", |b| b.iter(|| ops::spatial_softmax(black_box(&x))));
    let gamma = Array4::ones((1, 64, 1, 1));
    let beta = Array4::zeros((1, 64, 1, 1));
    c.bench_function("group_norm/64x32x64", |b| {
        b.iter(|| ops::group_norm(black_box(&x), &gamma, &beta, 8).unwrap())
    });
}

criterion_group!(benches, conv, softmax_and_norm);
criterion_main!(benches);
