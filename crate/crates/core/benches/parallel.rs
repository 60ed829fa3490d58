//! Parallel vs sequential execution of the data-parallel kernels.
//!
//! With the default `parallel` feature each benchmark runs twice: inside a one-thread rayon
//! pool (sequential schedule) and in the global pool. Building with `--no-default-features`
//! compiles the plain-loop fallback, which is reported under the `sequential-build` label.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use vq2_core::codec::{CodecConfig, HierarchicalCodec};
use vq2_core::prior::{PriorConfig, PriorNetwork};
use vq2_core::rng::seeded;
use vq2_core::{Tape, Tensor};

fn conv_step(x: &Tensor, k: &Tensor) -> f64 {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let kv = tape.leaf(k.clone(), true);
    let y = tape.conv2d(xv, kv, 1, 1).unwrap();
    let y = tape.relu(y).unwrap();
    let s = tape.sum(y).unwrap();
    let g = tape.backward(s).unwrap();
    g.wrt(kv).unwrap()[0]
}

fn small_prior() -> PriorNetwork {
    let mut cfg = PriorConfig::desk_top();
    cfg.hidden_units = 16;
    cfg.residual_units = 16;
    cfg.layers = 3;
    cfg.attention_layers = 1;
    cfg.output_stack_layers = 1;
    let mut rng = seeded(1);
    let mut p = PriorNetwork::new(cfg, &mut rng).unwrap();
    p.randomize_output(&mut rng);
    p
}

#[cfg(feature = "parallel")]
fn schedules() -> Vec<(&'static str, Option<rayon::ThreadPool>)> {
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    vec![("sequential", Some(one)), ("parallel", None)]
}

#[cfg(not(feature = "parallel"))]
fn schedules() -> Vec<(&'static str, Option<()>)> {
    vec![("sequential-build", None)]
}

#[cfg(feature = "parallel")]
fn within<T: Send>(pool: &Option<rayon::ThreadPool>, f: impl FnOnce() -> T + Send) -> T {
    match pool {
        Some(p) => p.install(f),
        None => f(),
    }
}

#[cfg(not(feature = "parallel"))]
fn within<T: Send>(_: &Option<()>, f: impl FnOnce() -> T + Send) -> T {
    f()
}

fn benches(c: &mut Criterion) {
    let mut rng = seeded(0);
    let x = Tensor::randn(&[16, 32, 16, 16], 1.0, &mut rng);
    let k = Tensor::randn(&[32, 32, 3, 3], 0.1, &mut rng);
    let codec = HierarchicalCodec::new(CodecConfig::desk(), &mut rng).unwrap();
    let images = Tensor::rand_uniform(&[16, 1, 32, 32], -0.5, 0.5, &mut rng);
    let prior = small_prior();

    let mut group = c.benchmark_group("kernels");
    group.sample_size(10);
    for (name, pool) in schedules() {
        group.bench_function(BenchmarkId::new("conv2d_fwd_bwd_b16", name), |b| {
            b.iter(|| within(&pool, || black_box(conv_step(&x, &k))))
        });
        group.bench_function(BenchmarkId::new("codec_encode_b16", name), |b| {
            b.iter(|| within(&pool, || black_box(codec.encode(&images).unwrap())))
        });
        group.bench_function(BenchmarkId::new("prior_sample_n8", name), |b| {
            b.iter(|| within(&pool, || black_box(prior.sample(8, None, None, 1.0, 3).unwrap())))
        });
    }
    group.finish();
}

criterion_group!(parallel_benches, benches);
criterion_main!(parallel_benches);
