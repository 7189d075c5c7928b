//! Rayon vs sequential timings for the hot kernels: tensor quantization,
//! reconstruction and one compressed optimizer step. `set_sequential` flips
//! the data-parallel helpers into their fallback path inside one process, so
//! both modes land in the same criterion report. Running the suite with
//! `--no-default-features` measures the build without rayon compiled in.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use lpopt::normalize::NormScheme;
use lpopt::optim::{adamw_step, AdamWConfig, AdamWState, Compressor};
use lpopt::parallel::set_sequential;
use lpopt::qmap::build_de_map;
use lpopt::quantizer::{dequantize, quantize, QuantizerSpec, Rounding};
use lpopt::rng::StreamKey;
use lpopt::Tensor;

fn tensor(n: usize) -> Tensor {
    let key = StreamKey::new(7);
    Tensor::from_vec((0..n).map(|i| key.uniform(i as u64) - 0.5).collect())
}

fn modes() -> &'static [&'static str] {
    if cfg!(feature = "parallel") {
        &["parallel", "sequential"]
    } else {
        &["sequential"]
    }
}

fn bench_quantize(c: &mut Criterion) {
    let mut group = c.benchmark_group("quantize_b128_de4");
    for &n in &[1 << 16, 1 << 20] {
        let x = tensor(n);
        let spec = QuantizerSpec::new(
            NormScheme::Block(128),
            build_de_map(4, true, true).unwrap(),
            Rounding::Stochastic,
        );
        for &mode in modes() {
            group.bench_with_input(BenchmarkId::new(mode, n), &n, |b, _| {
                set_sequential(mode == "sequential");
                b.iter(|| quantize(black_box(&x), &spec, StreamKey::new(1)).unwrap());
                set_sequential(false);
            });
        }
    }
    group.finish();
}

fn bench_dequantize(c: &mut Criterion) {
    let mut group = c.benchmark_group("dequantize_rank1_linear4");
    let x = Tensor::new(vec![1024, 1024], tensor(1 << 20).into_data()).unwrap();
    let spec = QuantizerSpec::new(
        NormScheme::Rank1,
        build_de_map(4, true, false).unwrap(),
        Rounding::Nearest,
    );
    let packed = quantize(&x, &spec, StreamKey::new(0)).unwrap();
    for &mode in modes() {
        group.bench_function(mode, |b| {
            set_sequential(mode == "sequential");
            b.iter(|| dequantize(black_box(&packed)).unwrap());
            set_sequential(false);
        });
    }
    group.finish();
}

fn bench_adamw_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("adamw4_step_1m");
    let n = 1 << 20;
    let g = tensor(n);
    let m_comp = Compressor::Map(QuantizerSpec::new(
        NormScheme::Block(128),
        build_de_map(4, true, true).unwrap(),
        Rounding::Nearest,
    ));
    let v_comp = Compressor::Map(QuantizerSpec::new(
        NormScheme::Block(128),
        lpopt::qmap::build_linear_map(4, false).unwrap(),
        Rounding::Nearest,
    ));
    let cfg = AdamWConfig {
        lr: 1e-3,
        ..Default::default()
    };
    for &mode in modes() {
        group.bench_function(mode, |b| {
            set_sequential(mode == "sequential");
            b.iter_batched(
                || (tensor(n), AdamWState::default()),
                |(mut theta, mut state)| {
                    adamw_step(
                        &mut theta,
                        &mut state,
                        &g,
                        &cfg,
                        &m_comp,
                        &v_comp,
                        false,
                        StreamKey::new(2),
                        false,
                    )
                    .unwrap();
                    theta
                },
                criterion::BatchSize::LargeInput,
            );
            set_sequential(false);
        });
    }
    group.finish();
}

criterion_group!(benches, bench_quantize, bench_dequantize, bench_adamw_step);
criterion_main!(benches);
