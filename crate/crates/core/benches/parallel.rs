//! Serial vs rayon kernels. Build with `--no-default-features` to bench
//! the serial fallback alone.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rifle_core::data::{make_synth_classification, SynthSpec};
use rifle_core::graph::{init_params, surrogate_cnn, Perturbations};
use rifle_core::tensor::{gaussian_init, matmul_serial};
use rifle_core::trainer::evaluate;
use rifle_core::Rng;

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [32usize, 128, 256] {
        let mut rng = Rng::new(0);
        let a = gaussian_init(&[n, n], 0.0, 1.0, &mut rng).unwrap();
        let b = gaussian_init(&[n, n], 0.0, 1.0, &mut rng).unwrap();
        group.bench_with_input(BenchmarkId::new("serial", n), &n, |bench, &n| {
            bench.iter(|| matmul_serial(black_box(a.data()), black_box(b.data()), n, n, n))
        });
        #[cfg(feature = "parallel")]
        group.bench_with_input(BenchmarkId::new("parallel", n), &n, |bench, &n| {
            bench.iter(|| rifle_core::tensor::matmul_parallel(black_box(a.data()), black_box(b.data()), n, n, n))
        });
    }
    group.finish();
}

fn evaluation(c: &mut Criterion) {
    let data = make_synth_classification(&SynthSpec {
        num_classes: 10,
        per_class: 40,
        test_per_class: None,
        dim: 192,
        separation: 5.0,
        seed: 0,
    })
    .unwrap()
    .target_test;
    let model = surrogate_cnn(3, 8, 8, &[8, 8, 16, 16], 10, &Perturbations::default()).unwrap();
    let params = init_params(&model, &mut Rng::new(1), 0.1).unwrap();
    let label = if rifle_core::par::is_parallel() {
        "parallel"
    } else {
        "serial"
    };
    c.bench_function(&format!("evaluate_cnn/{label}"), |bench| {
        bench.iter(|| evaluate(&model, &params, black_box(&data)).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = matmul, evaluation
}
criterion_main!(benches);
