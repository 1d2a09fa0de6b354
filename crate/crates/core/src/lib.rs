//! Low-bit quantization and binarization toolkit.
//!
//! - [`tensor`]: dense FP32 tensors, matmul, im2col convolution
//! - [`quant`]: uniform b-bit quantization, fake quantization, sign binarization, calibration
//! - [`autograd`]: reverse-mode differentiation with straight-through estimators
//! - [`bitkernels`]: bit-packed sign tensors, XNOR/popcount GEMM, integer GEMM
//! - [`engine`]: models, datasets, quantization-aware training, PTQ, checkpoints
//! - [`bench`]: GEMM micro-benchmarks and checkpoint size reports

pub mod autograd;
pub mod bench;
pub mod bitkernels;
pub mod engine;
pub mod error;
pub mod quant;
pub mod tensor;

pub use bench::{bench_gemm, size_report, BenchReport, Kernel};
pub use bitkernels::{int8_gemm, int8_gemm_nt, pack_bits, unpack_bits, xnor_gemm, BitTensor, IntMatrix};
pub use engine::{
    build_model, evaluate, gen_synthetic, load_checkpoint, load_idx, post_training_quantize, save_checkpoint, train,
    Config, Dataset, EvalMode, LayerSpec, Metrics, Model, TrainReport,
};
pub use error::{Error, Result};
pub use quant::{
    binarize, calibrate_ema, calibrate_minmax, compute_delta, dequantize, fake_quantize, quantize,
    Granularity, QTensor, QuantParams, Scheme,
};
pub use tensor::{conv2d, matmul, Tensor};
