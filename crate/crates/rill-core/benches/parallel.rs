//! Sequential vs. rayon kernels across the sizes the training loop actually
//! produces: activations (batch x width), weight gradients (width x width),
//! and the wide input layer of an image model.
//!
//! Run with `cargo bench -p rill-core`; pass `--no-default-features` to check
//! that the sequential-only build still compiles (the comparison benches are
//! skipped there).

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use rand::Rng;
use rill_core::matrix::{matmul_seq, Matrix};
use rill_core::rng::named_stream;

fn seeded(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = named_stream(seed, "bench");
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

fn bench_matmul(c: &mut Criterion) {
    let shapes = [
        ("batch-hidden", 64, 784, 128),
        ("grad-weight", 784, 64, 128),
        ("square", 256, 256, 256),
    ];
    let mut group = c.benchmark_group("matmul");
    for (label, m, k, n) in shapes {
        let a = seeded(m, k, 1);
        let b = seeded(k, n, 2);
        group.bench_with_input(BenchmarkId::new("seq", label), &(&a, &b), |bench, (a, b)| {
            bench.iter(|| black_box(matmul_seq(a, b)))
        });
        #[cfg(feature = "parallel")]
        group.bench_with_input(BenchmarkId::new("par", label), &(&a, &b), |bench, (a, b)| {
            bench.iter(|| black_box(rill_core::matrix::matmul_par(a, b)))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_matmul);
criterion_main!(benches);
