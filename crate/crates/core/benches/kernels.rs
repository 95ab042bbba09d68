//! Parallel (rayon) vs sequential kernels. Outputs are identical either way;
//! only wall time differs. Build with `--no-default-features` to compile the
//! rayon path out entirely.

use std::hint::black_box;

use coatsim::expand::expand_quantize;
use coatsim::optim::{step, AdamWConfig, OptimizerSlot, SlotPolicy};
use coatsim::quant::{QuantGeometry, Quantizer};
use coatsim::{par, rng, Fp8Format, Tensor};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand_distr::{Distribution, StandardNormal};

const N: usize = 1 << 20;

fn data(seed: u64, scale: f32) -> Tensor {
    let mut r = rng::stream(seed, 0);
    Tensor::from_vec(
        (0..N)
            .map(|_| {
                let z: f32 = StandardNormal.sample(&mut r);
                scale * z
            })
            .collect(),
    )
}

fn both(c: &mut Criterion, name: &str, mut f: impl FnMut()) {
    let mut g = c.benchmark_group(name);
    g.sample_size(20);
    g.bench_function(BenchmarkId::new("parallel", N), |b| b.iter(&mut f));
    g.bench_function(BenchmarkId::new("sequential", N), |b| b.iter(|| par::sequential(&mut f)));
    g.finish();
}

fn kernels(c: &mut Criterion) {
    let x = data(1, 1.0);
    let q = Quantizer::new(QuantGeometry::PerGroup(16), Fp8Format::E4M3);
    both(c, "quantize_1x16_e4m3", || {
        black_box(q.quantize(black_box(&x)).unwrap());
    });

    let v = Tensor::from_vec(x.data().iter().map(|a| a * a).collect());
    both(c, "expand_quantize_g128", || {
        black_box(expand_quantize(black_box(&v), 128, Fp8Format::E4M3).unwrap());
    });

    let w = data(2, 1.0);
    let grad = data(3, 1e-2);
    let cfg = AdamWConfig::default();
    let slot = OptimizerSlot::new(N, SlotPolicy::e4m3_expand()).unwrap();
    let (_, slot) = step(&w, &grad, &slot, &cfg).unwrap();
    both(c, "adamw_step_e4m3_expand", || {
        black_box(step(black_box(&w), &grad, &slot, &cfg).unwrap());
    });
}

criterion_group!(benches, kernels);
criterion_main!(benches);
