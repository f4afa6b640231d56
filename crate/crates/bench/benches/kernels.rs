use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use forest_structure::als::{compute_gini, rasterize_variables, GridSpec, PointCloud};
use forest_structure::ensemble::fuse_values;
use forest_structure::tensor::{BatchNormMode, GradStore, Graph, ParamStore, RunningStats};
use forest_structure::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// (label, input channels, output channels, groups, kernel)
const CONVS: [(&str, usize, usize, usize, usize); 4] = [
    ("dense3x3", 32, 32, 1, 3),
    ("grouped3x3", 32, 32, 4, 3),
    ("pointwise", 64, 64, 1, 1),
    ("sar5x5", 4, 16, 1, 5),
];

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut group = c.benchmark_group("conv2d");
    for (label, cin, cout, groups, k) in CONVS {
        let mut store = ParamStore::new();
        let w = store.add("w", uniform(&[cout, cin / groups, k, k], &mut rng)).unwrap();
        let b = store.add("b", uniform(&[cout], &mut rng)).unwrap();
        let x = uniform(&[16, cin, 15, 15], &mut rng);
        let pad = k / 2;
        group.bench_function(BenchmarkId::new("forward", label), |bench| {
            bench.iter(|| {
                let mut g = Graph::new(&store);
                let xi = g.input(x.clone());
                let (wv, bv) = (g.param(w), g.param(b));
                black_box(g.conv2d(xi, wv, Some(bv), groups, pad).unwrap());
            })
        });
        let mut grads = GradStore::zeros_like(&store);
        group.bench_function(BenchmarkId::new("forward_backward", label), |bench| {
            bench.iter(|| {
                grads.reset();
                let mut g = Graph::new(&store);
                let xi = g.input(x.clone());
                let (wv, bv) = (g.param(w), g.param(b));
                let y = g.conv2d(xi, wv, Some(bv), groups, pad).unwrap();
                let l = g.sum(y);
                g.backward(l, &mut grads).unwrap();
            })
        });
    }
    group.finish();
}

fn batch_norm(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let gamma = store.add("gamma", Tensor::full(&[64], 1.0)).unwrap();
    let beta = store.add("beta", Tensor::zeros(&[64])).unwrap();
    let x = uniform(&[16, 64, 15, 15], &mut rng);
    let mut grads = GradStore::zeros_like(&store);
    let mut running = RunningStats::uninitialized(64);
    c.bench_function("batch_norm/train_forward_backward", |bench| {
        bench.iter(|| {
            grads.reset();
            let mut g = Graph::new(&store);
            let xi = g.input(x.clone());
            let (gv, bv) = (g.param(gamma), g.param(beta));
            let mode = BatchNormMode::Train {
                running: Some(&mut running),
                momentum: 0.1,
            };
            let y = g.batch_norm(xi, gv, bv, mode, 1e-5).unwrap();
            let l = g.sum(y);
            g.backward(l, &mut grads).unwrap();
        })
    });
}

fn gaussian_nll(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let shape = [16, 5, 15, 15];
    let m = store.add("m", uniform(&shape, &mut rng)).unwrap();
    let s = store.add("s", uniform(&shape, &mut rng)).unwrap();
    let y = uniform(&shape, &mut rng);
    let mask: Vec<bool> = (0..16 * 15 * 15).map(|_| rng.random_bool(0.7)).collect();
    let mut grads = GradStore::zeros_like(&store);
    c.bench_function("gaussian_nll/forward_backward", |bench| {
        bench.iter(|| {
            grads.reset();
            let mut g = Graph::new(&store);
            let (mv, sv) = (g.param(m), g.param(s));
            let l = g.gaussian_nll(mv, sv, y.clone(), mask.clone(), 10.0).unwrap();
            g.backward(l, &mut grads).unwrap();
        })
    });
}

fn als(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let dz: Vec<f64> = (0..1000).map(|_| rng.random_range(1.31..35.0)).collect();
    c.bench_function("als/gini_1000", |bench| bench.iter(|| compute_gini(black_box(&dz))));

    // 10 pts/m² over a 20×20 grid of 10 m cells
    let grid = GridSpec::new(0.0, 200.0, 10.0, 20, 20).unwrap();
    let pts: Vec<(f64, f64, f64)> = (0..400_000)
        .map(|_| (rng.random_range(0.0..200.0), rng.random_range(0.0..200.0), rng.random_range(0.0..30.0)))
        .collect();
    let cloud = PointCloud::from_heights(pts).unwrap();
    let mut group = c.benchmark_group("als");
    group.sample_size(10);
    group.bench_function("rasterize_400k_points", |bench| {
        bench.iter(|| rasterize_variables(black_box(&cloud), &grid, None).unwrap())
    });
    group.finish();
}

fn fusion(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let means: Vec<f64> = (0..8).map(|_| rng.random_range(0.0..30.0)).collect();
    let vars: Vec<f64> = (0..8).map(|_| rng.random_range(0.1..10.0)).collect();
    c.bench_function("fuse_values/8", |bench| bench.iter(|| fuse_values(black_box(&means), black_box(&vars))));
}

criterion_group!(benches, conv, batch_norm, gaussian_nll, als, fusion);
criterion_main!(benches);
