//! Hot-path benchmarks: convolution forward/backward, network forward,
//! CLAHE, bilinear resampling, and phantom synthesis.

use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;
use vertseg_core::imaging::{clahe, resize_bilinear, BitDepth, ClaheParams, GrayImage};
use vertseg_core::objectives;
use vertseg_core::phantom::{generate, PhantomParams};
use vertseg_core::tensor::{Graph, Tensor};
use vertseg_core::{UNetConfig, UNetModel};

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).unwrap()
}

fn bench_conv2d(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let input = random_tensor(&mut rng, vec![1, 8, 64, 64]);
    let weight = random_tensor(&mut rng, vec![8, 8, 3, 3]);
    let bias = random_tensor(&mut rng, vec![8]);
    c.bench_function("conv2d_fwd_8ch_64x64", |b| {
        b.iter(|| {
            let mut g = Graph::<f32>::new();
            let x = g.leaf(black_box(input.clone())).unwrap();
            let w = g.leaf(weight.clone()).unwrap();
            let bi = g.leaf(bias.clone()).unwrap();
            black_box(g.conv2d(x, w, bi).unwrap());
        })
    });

    let input_g = input.clone().with_requires_grad(true);
    let weight_g = weight.clone().with_requires_grad(true);
    let bias_g = bias.clone().with_requires_grad(true);
    c.bench_function("conv2d_fwd_bwd_8ch_64x64", |b| {
        b.iter(|| {
            let mut g = Graph::<f32>::new();
            let x = g.leaf(input_g.clone()).unwrap();
            let w = g.leaf(weight_g.clone()).unwrap();
            let bi = g.leaf(bias_g.clone()).unwrap();
            let y = g.conv2d(x, w, bi).unwrap();
            let loss = g.sum(y).unwrap();
            g.backward(loss).unwrap();
            black_box(g.grad(w).unwrap()[0]);
        })
    });
}

fn bench_unet_step(c: &mut Criterion) {
    let config = UNetConfig {
        depth: 2,
        base_channels: 8,
        in_channels: 1,
        out_channels: 1,
        kernel: 3,
    };
    let model = UNetModel::<f32>::build(config, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let input_data: Vec<f32> = (0..64 * 64).map(|_| rng.random_range(0.0..1.0)).collect();
    let input = Tensor::new(vec![1, 1, 64, 64], input_data).unwrap();
    let truth: Vec<f32> = (0..64 * 64).map(|_| f32::from(rng.random_range(0..2u16))).collect();

    c.bench_function("unet_fwd_depth2_base8_64x64", |b| {
        b.iter(|| {
            let mut g = Graph::<f32>::new();
            let pass = model.forward(&mut g, black_box(input.clone())).unwrap();
            black_box(g.value(pass.output).data()[0]);
        })
    });
    c.bench_function("unet_fwd_bwd_depth2_base8_64x64", |b| {
        b.iter(|| {
            let mut g = Graph::<f32>::new();
            let pass = model.forward(&mut g, input.clone()).unwrap();
            let loss = objectives::combined_loss(&mut g, pass.output, &truth, 1.0).unwrap();
            g.backward(loss).unwrap();
            black_box(g.grad(pass.params[0]).unwrap()[0]);
        })
    });
}

fn bench_imaging(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pixels: Vec<u16> = (0..512 * 512).map(|_| rng.random_range(0..256)).collect();
    let image = GrayImage::new(512, 512, BitDepth::Eight, pixels).unwrap();
    c.bench_function("clahe_512x512_8x8tiles", |b| {
        b.iter(|| black_box(clahe(&image, &ClaheParams::default()).unwrap()))
    });
    c.bench_function("resize_512_to_64", |b| {
        b.iter(|| black_box(resize_bilinear(&image, 64, 64).unwrap()))
    });
}

fn bench_phantom(c: &mut Criterion) {
    c.bench_function("phantom_generate_64x64", |b| {
        let mut seed = 0;
        b.iter(|| {
            seed += 1;
            let params = PhantomParams {
                seed,
                ..PhantomParams::default()
            };
            black_box(generate(&params).unwrap())
        })
    });
}

criterion_group!(
    benches,
    bench_conv2d,
    bench_unet_step,
    bench_imaging,
    bench_phantom
);
criterion_main!(benches);
