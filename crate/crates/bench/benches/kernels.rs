use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use cimark::afmm::Afmm;
use cimark::distortions::{training_distort, AffineParams, DistortionSpec};
use cimark::metrics::ssim;
use cimark::params::{init, ParamStore};
use cimark::rng::seeded_rng;
use cimark::tensor::{ConvGeom, Graph, Tensor};
use cimark_bench::batch;

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv3x3");
    for &ch in &[16usize, 64] {
        let mut rng = seeded_rng(0);
        let mut store = ParamStore::<f32>::new();
        store.insert("w", init::uniform(&mut rng, &[ch, ch, 3, 3], 0.1));
        let x: Tensor<f32> = init::uniform(&mut rng, &[8, ch, 32, 32], 1.0);
        group.bench_with_input(BenchmarkId::new("forward", ch), &ch, |b, _| {
            b.iter(|| {
                let mut g = Graph::with_params(&store);
                let xv = g.constant(x.clone());
                let w = g.param("w");
                let y = g_conv(&mut g, xv, w);
                black_box(g.value(y).numel())
            })
        });
        group.bench_with_input(BenchmarkId::new("forward+backward", ch), &ch, |b, _| {
            b.iter(|| {
                let mut g = Graph::with_params(&store);
                let xv = g.input(x.clone());
                let w = g.param("w");
                let y = g_conv(&mut g, xv, w);
                let l = g.mean(y);
                black_box(g.backward(l).get(xv).map(|t| t.numel()))
            })
        });
    }
    group.finish();
}

fn g_conv(g: &mut Graph<f32>, x: cimark::tensor::Var, w: cimark::tensor::Var) -> cimark::tensor::Var {
    g.conv2d(x, w, None, ConvGeom::same3())
}

fn afmm(c: &mut Criterion) {
    let module = Afmm::new("m", 32);
    let mut store = ParamStore::<f32>::new();
    let mut rng = seeded_rng(1);
    module.init(&mut store, &mut rng);
    let x: Tensor<f32> = init::uniform(&mut rng, &[8, 32, 32, 32], 1.0);
    c.bench_function("afmm/apply 8x32x32x32", |b| {
        b.iter(|| {
            let mut g = Graph::with_params(&store);
            let f = g.constant(x.clone());
            black_box(module.apply(&mut g, f).0)
        })
    });
}

fn distortion(c: &mut Criterion) {
    let (images, _) = batch(8, 64, 32);
    let x = cimark::model::stack_images(&images).unwrap();
    let warp = AffineParams {
        rotation: 40.0,
        translate: [0.1, -0.2],
        scale: 1.1,
        shear: [10.0, -5.0],
    };
    let specs = [DistortionSpec {
        affine: warp,
        noise_sigma: 0.04,
        order_bit: 0,
    }; 8];
    c.bench_function("distortion/affine+noise 8x64x64", |b| {
        b.iter(|| {
            let mut g = Graph::<f32>::new();
            let v = g.constant(x.clone());
            black_box(training_distort(&mut g, v, &specs, &mut seeded_rng(3)))
        })
    });
}

fn metrics(c: &mut Criterion) {
    let (images, _) = batch(2, 64, 32);
    c.bench_function("metrics/ssim 64x64", |b| b.iter(|| ssim(black_box(&images[0]), &images[1]).unwrap()));
}

criterion_group!(benches, conv, afmm, distortion, metrics);
criterion_main!(benches);
