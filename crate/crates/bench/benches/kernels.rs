use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use panmorph_bench::{field, image, seg_model};
use panmorph::deformation::{integrate_velocity, warp_image, Interp, VelocityField};
use panmorph::nn::Conv2d;
use panmorph::no_grad;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const H: usize = 64;
const W: usize = 128;

fn conv(c: &mut Criterion) {
    let x = image(16, H, W);
    let layer = Conv2d::new(16, 32, 3, 1, &mut ChaCha8Rng::seed_from_u64(0));
    c.bench_function("conv3x3_16to32_64x128", |b| b.iter(|| no_grad(|| layer.forward(black_box(&x)))));
}

fn warp(c: &mut Criterion) {
    let x = image(3, H, W);
    let phi = field(H, W, 3.0);
    c.bench_function("warp_bilinear_64x128", |b| {
        b.iter(|| no_grad(|| warp_image(black_box(&x), &phi, Interp::Bilinear).unwrap()))
    });
}

fn integrate(c: &mut Criterion) {
    let v = VelocityField(field(H, W, 4.0).0);
    c.bench_function("integrate_7_steps_64x128", |b| {
        b.iter(|| no_grad(|| integrate_velocity(black_box(&v), 7).unwrap()))
    });
}

fn segment(c: &mut Criterion) {
    let model = seg_model();
    let x = image(3, H, W);
    c.bench_function("seg_forward_64x128", |b| {
        b.iter(|| no_grad(|| model.forward_full(black_box(&x)).unwrap()))
    });
    c.bench_function("seg_forward_backward_64x128", |b| {
        b.iter(|| {
            let out = model.forward_full(black_box(&x)).unwrap();
            out.fused_logits().sqr().mean().backward()
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = conv, warp, integrate, segment
}
criterion_main!(benches);
