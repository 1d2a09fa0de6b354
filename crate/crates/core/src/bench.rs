//! GEMM micro-benchmarks and checkpoint size reports.
//!
//! Every timed kernel is first cross-checked against an oracle on a 64³
//! instance; a failing check aborts before anything is timed.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bitkernels::{int_gemm_nt, pack_bits, xnor_gemm, IntOperand};
use crate::engine::checkpoint::{self, Encoding};
use crate::error::{Error, Result};
use crate::quant::{binarize, dequantize, quantize, QuantParams, Scheme};
use crate::tensor::{matmul, matmul_nt, Tensor};

pub const MIN_REPS: usize = 5;
pub const MIN_SIZE: usize = 64;
const CHECK_SIZE: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    Fp32,
    Int8,
    Xnor,
}

impl Kernel {
    pub const ALL: [Kernel; 3] = [Kernel::Fp32, Kernel::Int8, Kernel::Xnor];

    pub fn name(self) -> &'static str {
        match self {
            Kernel::Fp32 => "gemm_fp32",
            Kernel::Int8 => "gemm_int8",
            Kernel::Xnor => "gemm_xnor",
        }
    }
}

impl std::str::FromStr for Kernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fp32" => Ok(Kernel::Fp32),
            "int8" => Ok(Kernel::Int8),
            "xnor" => Ok(Kernel::Xnor),
            other => Err(Error::arg(format!("unknown kernel `{other}` (fp32, int8, xnor)"))),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchRecord {
    pub op: &'static str,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub reps: usize,
    pub threads: usize,
    pub median_s: f64,
    pub gops: f64,
    pub speedup_vs_fp32: f64,
    #[serde(skip)]
    pub times_s: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub records: Vec<BenchRecord>,
}

pub const CSV_HEADER: &str = "op,m,k,n,reps,threads,median_s,gops,speedup_vs_fp32";

impl BenchReport {
    pub fn record(&self, kernel: Kernel) -> Option<&BenchRecord> {
        self.records.iter().find(|r| r.op == kernel.name())
    }

    /// CSV rows, optionally preceded by [`CSV_HEADER`].
    pub fn to_csv(&self, header: bool) -> String {
        let mut out = String::new();
        if header {
            out.push_str(CSV_HEADER);
            out.push('\n');
        }
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{:.9},{:.4},{:.4}\n",
                r.op, r.m, r.k, r.n, r.reps, r.threads, r.median_s, r.gops, r.speedup_vs_fp32
            ));
        }
        out
    }

    /// One JSON object per line, same fields as the CSV.
    pub fn to_json_lines(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("plain record") + "\n")
            .collect()
    }
}

fn median(times: &[f64]) -> f64 {
    let mut sorted = times.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        (sorted[mid - 1] + sorted[mid]) / 2.0
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_fn([rows, cols], |_| rng.random_range(-1.0f32..1.0))
}

/// Pre-packed operands for every kernel; preparation is never timed.
struct Operands {
    a: Tensor,
    b: Tensor,
    a_int: IntOperand,
    b_int: IntOperand,
    a_bits: crate::BitTensor,
    b_bits: crate::BitTensor,
}

/// Symmetric 8-bit params with a power-of-two step, so the FP32 oracle of
/// the integer kernel is exact.
fn dyadic_params() -> QuantParams {
    let delta = 1.0f32 / 128.0;
    QuantParams::per_tensor(8, Scheme::Symmetric, -127.5 * delta, 127.5 * delta)
        .expect("valid dyadic range")
}

impl Operands {
    fn new(rng: &mut ChaCha8Rng, m: usize, k: usize, n: usize) -> Result<Self> {
        let a = random_matrix(rng, m, k);
        let b = random_matrix(rng, k, n);
        let b_t = b.transpose()?;
        let p = dyadic_params();
        Ok(Operands {
            a_int: IntOperand::from_rows(&quantize(&a, &p)?)?,
            b_int: IntOperand::from_rows(&quantize(&b_t, &p)?)?,
            a_bits: pack_bits(&a)?,
            b_bits: pack_bits(&b_t)?,
            a,
            b,
        })
    }

    fn run(&self, kernel: Kernel) -> Result<Tensor> {
        match kernel {
            Kernel::Fp32 => matmul(&self.a, &self.b),
            Kernel::Int8 => int_gemm_nt(&self.a_int, &self.b_int),
            Kernel::Xnor => Ok(xnor_gemm(&self.a_bits, &self.b_bits)?.to_tensor()),
        }
    }
}

/// Checks one kernel against its oracle on a small instance.
pub fn cross_check(kernel: Kernel, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = CHECK_SIZE;
    let ops = Operands::new(&mut rng, s, s, s)?;
    let got = ops.run(kernel)?;
    let want = match kernel {
        Kernel::Fp32 => {
            // Plain triple loop with the same ascending reduction order.
            Tensor::from_fn([s, s], |idx| {
                let (i, j) = (idx / s, idx % s);
                (0..s).fold(0.0f32, |acc, p| acc + ops.a.data()[i * s + p] * ops.b.data()[p * s + j])
            })
        }
        Kernel::Int8 => {
            let p = dyadic_params();
            let qa = quantize(&ops.a, &p)?;
            let qb = quantize(&ops.b.transpose()?, &p)?;
            matmul_nt(&dequantize(&qa), &dequantize(&qb))?
        }
        Kernel::Xnor => matmul(&binarize(&ops.a), &binarize(&ops.b))?,
    };
    if got != want {
        return Err(Error::KernelCheck(format!(
            "{} disagrees with its oracle on a {s}³ instance",
            kernel.name()
        )));
    }
    Ok(())
}

fn time_kernel(ops: &Operands, kernel: Kernel, reps: usize) -> Result<Vec<f64>> {
    std::hint::black_box(ops.run(kernel)?);
    (0..reps)
        .map(|_| {
            let start = Instant::now();
            let out = ops.run(kernel)?;
            let elapsed = start.elapsed().as_secs_f64();
            std::hint::black_box(out);
            Ok(elapsed.max(f64::MIN_POSITIVE))
        })
        .collect()
}

/// Times the requested kernels at `(m, k, n)` on the current rayon pool.
/// The FP32 baseline is always timed so speedups are defined.
pub fn bench_gemm(size: (usize, usize, usize), reps: usize, kernels: &[Kernel], seed: u64) -> Result<BenchReport> {
    let (m, k, n) = size;
    if m < MIN_SIZE || k < MIN_SIZE || n < MIN_SIZE {
        return Err(Error::arg(format!("bench sizes must be at least {MIN_SIZE}, got {m}×{k}×{n}")));
    }
    if reps < MIN_REPS {
        return Err(Error::arg(format!("bench needs at least {MIN_REPS} reps, got {reps}")));
    }
    if kernels.is_empty() {
        return Err(Error::arg("no kernels selected"));
    }
    let mut wanted: Vec<Kernel> = Vec::new();
    for &kern in kernels {
        if !wanted.contains(&kern) {
            wanted.push(kern);
        }
    }
    for &kern in wanted.iter().chain(std::iter::once(&Kernel::Fp32)) {
        cross_check(kern, seed)?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ops = Operands::new(&mut rng, m, k, n)?;
    let threads = rayon::current_num_threads();
    let baseline = median(&time_kernel(&ops, Kernel::Fp32, reps)?);
    let ops_count = 2.0 * m as f64 * k as f64 * n as f64;
    let records = wanted
        .into_iter()
        .map(|kern| {
            let times = time_kernel(&ops, kern, reps)?;
            let med = median(&times);
            Ok(BenchRecord {
                op: kern.name(),
                m,
                k,
                n,
                reps,
                threads,
                median_s: med,
                gops: ops_count / med / 1e9,
                speedup_vs_fp32: if kern == Kernel::Fp32 { 1.0 } else { baseline / med },
                times_s: times,
            })
        })
        .collect::<Result<_>>()?;
    Ok(BenchReport { records })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SizeRow {
    pub layer: String,
    pub bits: u8,
    pub encoding: Encoding,
    pub bytes: u64,
    pub fp32_bytes: u64,
    pub compression: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SizeReport {
    pub rows: Vec<SizeRow>,
    pub weight_bytes: u64,
    pub weight_fp32_bytes: u64,
    pub compression: f64,
    /// Header, manifest and non-weight tensors (biases).
    pub overhead_bytes: u64,
    pub file_bytes: u64,
}

pub const SIZE_CSV_HEADER: &str = "layer,bits,encoding,bytes,fp32_bytes,compression";

impl SizeReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{SIZE_CSV_HEADER}\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{:.4}\n",
                r.layer, r.bits, r.encoding, r.bytes, r.fp32_bytes, r.compression
            ));
        }
        out.push_str(&format!(
            "total,,,{},{},{:.4}\noverhead,,,{},,\n",
            self.weight_bytes, self.weight_fp32_bytes, self.compression, self.overhead_bytes
        ));
        out
    }
}

/// Per-layer weight-blob sizes against their FP32 equivalent.
pub fn size_report(path: &Path) -> Result<SizeReport> {
    let (header, file_bytes) = checkpoint::read_manifest(path)?;
    let mut rows = Vec::new();
    for (i, layer) in header.layers.iter().enumerate() {
        let Some(w) = &layer.weight else { continue };
        let fp32_bytes = 4 * w.shape.iter().product::<usize>() as u64;
        rows.push(SizeRow {
            layer: format!("{i}:{}", layer.spec.kind_name()),
            bits: w.bits,
            encoding: w.encoding,
            bytes: w.length,
            fp32_bytes,
            compression: fp32_bytes as f64 / w.length as f64,
        });
    }
    let weight_bytes = rows.iter().map(|r| r.bytes).sum();
    let weight_fp32_bytes = rows.iter().map(|r| r.fp32_bytes).sum();
    Ok(SizeReport {
        compression: weight_fp32_bytes as f64 / weight_bytes as f64,
        overhead_bytes: file_bytes - weight_bytes,
        rows,
        weight_bytes,
        weight_fp32_bytes,
        file_bytes,
    })
}
