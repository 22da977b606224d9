use std::rc::Rc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use gantry::metrics::{frechet_distance, FeatureMoments};
use gantry::tensor::{gradients, NeighborTable};
use gantry::{no_grad, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::from_vec((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), shape).unwrap()
}

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("matmul");
    for n in [64, 256] {
        let (a, b) = (random(&mut rng, &[n, n]), random(&mut rng, &[n, n]));
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            let _g = no_grad();
            bench.iter(|| a.matmul(&b).unwrap())
        });
    }
    group.finish();
}

fn local_attention(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut group = c.benchmark_group("local_attention");
    group.sample_size(20);
    // 32 x 32 grid, 16 groups of width 16.
    let (side, groups, d) = (32, 16, 16);
    let shape = [groups, side * side, d];
    let (q, k, v) = (random(&mut rng, &shape), random(&mut rng, &shape), random(&mut rng, &shape));
    for window in [Some(8), Some(14), None] {
        let table = Rc::new(NeighborTable::grid(side, window));
        let label = window.map_or("full".to_string(), |w| w.to_string());
        group.bench_function(BenchmarkId::new("forward", &label), |bench| {
            let _g = no_grad();
            bench.iter(|| Tensor::local_attention(&q, &k, &v, table.clone()).unwrap())
        });
        let (qp, kp, vp) = (q.with_requires_grad(true), k.with_requires_grad(true), v.with_requires_grad(true));
        group.bench_function(BenchmarkId::new("forward_backward", &label), |bench| {
            bench.iter(|| {
                let out = Tensor::local_attention(&qp, &kp, &vp, table.clone()).unwrap();
                gradients(&out.square().sum(), &[&qp, &kp, &vp], false).unwrap()
            })
        });
    }
    group.finish();
}

fn frechet(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let d = 64;
    let moments = |rng: &mut ChaCha8Rng| {
        let features: Vec<f64> = (0..512 * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        FeatureMoments::from_features(&features, 512, d).unwrap()
    };
    let (a, b) = (moments(&mut rng), moments(&mut rng));
    c.bench_function("frechet_distance_64", |bench| bench.iter(|| frechet_distance(&a, &b).unwrap()));
}

criterion_group!(benches, matmul, local_attention, frechet);
criterion_main!(benches);
