use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sisifus::global_prior::{Architecture, Network};
use sisifus::lifetime::{fit_lifetime, FitConfig};
use sisifus::local_prior::{generate_local_prior, LocalPriorConfig};
use sisifus::metrics::{ssim, SSIM_WINDOW};
use sisifus::phantom::generate_datacube;
use sisifus::render::{clahe_array, ClaheConfig};
use sisifus::sampling::bilinear_upsample;
use sisifus::solver::{reconstruct, tv_adjoint, tv_forward, ReconstructionConfig};
use sisifus_bench::two_class;

fn operators(c: &mut Criterion) {
    let f = two_class(256, 8);
    c.bench_function("bilinear 32->256", |b| {
        b.iter(|| bilinear_upsample(black_box(&f.lr), &f.map).unwrap())
    });
    c.bench_function("tv forward+adjoint 256", |b| {
        b.iter(|| tv_adjoint(&tv_forward(black_box(f.gt.values()))))
    });
    c.bench_function("ssim 256 w25", |b| {
        b.iter(|| ssim(black_box(f.gt.values()), f.intensity.values(), SSIM_WINDOW).unwrap())
    });
    c.bench_function("clahe 256", |b| {
        b.iter(|| clahe_array(black_box(f.intensity.values()), &ClaheConfig::default()).unwrap())
    });
}

fn stages(c: &mut Criterion) {
    let f = two_class(256, 8);
    let mut group = c.benchmark_group("stages");
    group.sample_size(10);
    group.bench_function("local prior 256 @8x", |b| {
        b.iter(|| {
            generate_local_prior(&f.lr, &f.intensity, &f.map, &LocalPriorConfig::default()).unwrap()
        })
    });
    let lp =
        generate_local_prior(&f.lr, &f.intensity, &f.map, &LocalPriorConfig::default()).unwrap();
    let cfg = ReconstructionConfig {
        admm_iters: 2,
        ..ReconstructionConfig::for_factor(8)
    };
    group.bench_function("reconstruct 256 @8x, 2 ADMM iterations", |b| {
        b.iter(|| reconstruct(&f.lr, Some(&lp), None, None, &f.map, &cfg).unwrap())
    });
    let small = two_class(64, 8);
    let cube = generate_datacube(&small.gt, &small.intensity, 256, 0.05, 3).unwrap();
    group.bench_function("fit 64x64x256", |b| {
        b.iter(|| fit_lifetime(black_box(&cube), &FitConfig::default()).unwrap())
    });
    group.finish();
}

fn network(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let net = Network::new(Architecture::default(), &mut rng).unwrap();
    let batch = 100;
    let x: Vec<f64> = (0..batch * net.arch.input_len())
        .map(|_| rng.random_range(0.0..1.0))
        .collect();
    let y: Vec<f64> = (0..batch).map(|_| rng.random_range(-1.0..1.0)).collect();
    c.bench_function("cnn forward batch 100", |b| {
        b.iter(|| net.forward(black_box(&x), batch))
    });
    c.bench_function("cnn forward+backward batch 100", |b| {
        b.iter(|| net.mae_and_gradients(black_box(&x), &y))
    });
}

criterion_group!(benches, operators, stages, network);
criterion_main!(benches);
