use std::hint::black_box;

use bq_core::bitkernels::{int_gemm_nt, IntOperand};
use bq_core::tensor::matmul_nt;
use bq_core::{fake_quantize, pack_bits, quantize, xnor_gemm, QuantParams, Scheme, Tensor};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_fn([rows, cols], |_| rng.random_range(-1.0f32..1.0))
}

fn gemm(c: &mut Criterion) {
    let mut group = c.benchmark_group("gemm");
    group.sample_size(10);
    let params = QuantParams::per_tensor(8, Scheme::Symmetric, -127.5 / 128.0, 127.5 / 128.0).unwrap();
    for size in [256usize, 1024] {
        let mut rng = ChaCha8Rng::seed_from_u64(size as u64);
        let a = random(&mut rng, size, size);
        let b_t = random(&mut rng, size, size);
        let a_int = IntOperand::from_rows(&quantize(&a, &params).unwrap()).unwrap();
        let b_int = IntOperand::from_rows(&quantize(&b_t, &params).unwrap()).unwrap();
        let a_bits = pack_bits(&a).unwrap();
        let b_bits = pack_bits(&b_t).unwrap();
        group.throughput(Throughput::Elements(2 * (size as u64).pow(3)));
        group.bench_with_input(BenchmarkId::new("fp32", size), &size, |bench, _| {
            bench.iter(|| matmul_nt(black_box(&a), black_box(&b_t)).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("int8", size), &size, |bench, _| {
            bench.iter(|| int_gemm_nt(black_box(&a_int), black_box(&b_int)).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("xnor", size), &size, |bench, _| {
            bench.iter(|| xnor_gemm(black_box(&a_bits), black_box(&b_bits)).unwrap())
        });
    }
    group.finish();
}

fn elementwise(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&mut rng, 1024, 1024);
    let params = QuantParams::per_tensor(4, Scheme::Affine, -1.0, 1.0).unwrap();
    let mut group = c.benchmark_group("elementwise");
    group.throughput(Throughput::Elements(x.numel() as u64));
    group.bench_function("fake_quantize_4bit", |b| b.iter(|| fake_quantize(black_box(&x), &params).unwrap()));
    group.bench_function("pack_bits", |b| b.iter(|| pack_bits(black_box(&x)).unwrap()));
    group.finish();
}

criterion_group!(benches, gemm, elementwise);
criterion_main!(benches);
