//! Throughput of the data-parallel kernels. With the `parallel` feature each
//! kernel runs on a one-thread pool and on the full pool; build with
//! `--no-default-features` for the sequential backend.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use deepsplit::neural::init_network;
use deepsplit::problem::make_regulator_problem;
use deepsplit::simulate::simulate_euler;
use deepsplit::{Activation, RegulatorParams, RngStream, TimeGrid};

#[cfg(feature = "parallel")]
fn backends() -> Vec<(String, rayon::ThreadPool)> {
    let mut counts = vec![1, rayon::current_num_threads()];
    counts.dedup();
    counts
        .into_iter()
        .map(|n| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap();
            (format!("rayon-{n}"), pool)
        })
        .collect()
}

#[cfg(not(feature = "parallel"))]
fn backends() -> Vec<(String, ())> {
    vec![("sequential".into(), ())]
}

#[cfg(feature = "parallel")]
fn on<R: Send>(pool: &rayon::ThreadPool, f: impl FnOnce() -> R + Send) -> R {
    pool.install(f)
}

#[cfg(not(feature = "parallel"))]
fn on<R>(_: &(), f: impl FnOnce() -> R) -> R {
    f()
}

fn simulation(c: &mut Criterion) {
    let d = 4;
    let spec = make_regulator_problem(&RegulatorParams::paper(d), d).unwrap();
    let grid = TimeGrid::new(1.0, 10).unwrap();
    let stream = RngStream::new(0, 0);
    let mut group = c.benchmark_group("simulate_euler_d4_n10");
    for (name, pool) in backends() {
        group.bench_function(BenchmarkId::new(name, 4096), |b| {
            b.iter(|| {
                on(&pool, || {
                    simulate_euler(&spec, &grid, black_box(4096), &stream).unwrap()
                })
            })
        });
    }
    group.finish();
}

fn loss_gradient(c: &mut Criterion) {
    let d = 10;
    let net = init_network(d, &[d + 10, d + 10], Activation::Sigmoid, &RngStream::new(1, 0)).unwrap();
    let n = 8192;
    let inputs: Vec<f64> = (0..n * d).map(|k| ((k * 7919) % 1000) as f64 / 500.0 - 1.0).collect();
    let targets: Vec<f64> = (0..n).map(|k| (k % 13) as f64 / 13.0).collect();
    let mut group = c.benchmark_group("mse_loss_and_gradient_d10");
    for (name, pool) in backends() {
        group.bench_function(BenchmarkId::new(name, n), |b| {
            b.iter(|| {
                on(&pool, || {
                    net.mse_loss_and_gradient(black_box(&inputs), &targets).unwrap()
                })
            })
        });
    }
    group.finish();
}

criterion_group!(benches, simulation, loss_gradient);
criterion_main!(benches);
