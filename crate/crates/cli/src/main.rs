use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use bq_core::bench::{self, Kernel};
use bq_core::engine::config::DataKind;
use bq_core::engine::{
    build_model, evaluate, gen_synthetic, load_checkpoint, load_idx, post_training_quantize, save_checkpoint,
    train, Config, Dataset, EvalMode, Split, SyntheticKind,
};
use bq_core::quant::Scheme;
use bq_core::{pack_bits, Tensor};
use clap::{Parser, Subcommand, ValueEnum};

mod data_spec;

use data_spec::DataSpec;

#[derive(Parser)]
#[command(name = "bq", version, about = "Low-bit quantization toolkit: QAT, PTQ, bit-packed kernels and benchmarks")]
struct Cli {
    /// Worker threads for kernels and evaluation (default: all cores).
    #[arg(long, global = true, env = "BQ_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a JSON config and write a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Training data, overriding the config's `data` section.
        #[arg(long)]
        data: Option<DataSpec>,
        /// Also write the JSON report to this file.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// `blobs:N:SEED`, `xor:N:SEED` or `idx:IMAGES,LABELS`.
        #[arg(long)]
        data: DataSpec,
        #[arg(long, default_value = "fake")]
        mode: ModeArg,
    },
    /// Post-training quantization of an FP32 checkpoint.
    Quantize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        bits: u8,
        #[arg(long)]
        calib: DataSpec,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "symmetric")]
        scheme: SchemeArg,
    },
    /// Time the GEMM kernels.
    Bench {
        #[arg(long, default_value = "gemm")]
        op: Op,
        /// Square problem size; `--m/--k/--n` override single dimensions.
        #[arg(long, default_value_t = 1024)]
        size: usize,
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, default_value_t = 10)]
        reps: usize,
        #[arg(long, value_delimiter = ',', default_value = "fp32,int8,xnor")]
        kernels: Vec<KernelArg>,
        #[arg(long, default_value = "csv")]
        format: Format,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Append rows to this file instead of only printing them.
        #[arg(long)]
        append: Option<PathBuf>,
    },
    /// Pack a raw little-endian f32 matrix into a bit blob.
    Pack {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        rows: usize,
        #[arg(long)]
        cols: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-layer storage of a checkpoint.
    Size {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "csv")]
        format: Format,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Op {
    Gemm,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Fake,
    Int,
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    PaperLiteral,
    Affine,
    Symmetric,
}

#[derive(Clone, Copy, ValueEnum)]
enum KernelArg {
    Fp32,
    Int8,
    Xnor,
}

impl From<ModeArg> for EvalMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Fake => EvalMode::Fake,
            ModeArg::Int => EvalMode::Int,
        }
    }
}

impl From<SchemeArg> for Scheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::PaperLiteral => Scheme::PaperLiteral,
            SchemeArg::Affine => Scheme::Affine,
            SchemeArg::Symmetric => Scheme::Symmetric,
        }
    }
}

impl From<KernelArg> for Kernel {
    fn from(k: KernelArg) -> Self {
        match k {
            KernelArg::Fp32 => Kernel::Fp32,
            KernelArg::Int8 => Kernel::Int8,
            KernelArg::Xnor => Kernel::Xnor,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let threads = match cli.threads {
        Some(0) => bail!("--threads must be at least 1"),
        Some(t) => t,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .context("building the thread pool")?;
    pool.install(|| dispatch(cli.command))
}

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string(value).expect("JSON value"));
}

fn load_data(spec: &DataSpec, split: Split) -> Result<Dataset> {
    let data = match spec {
        DataSpec::Synthetic { kind, n, seed } => gen_synthetic(*kind, *n, *seed)?,
        DataSpec::Idx { images, labels } => load_idx(images, labels)?,
    };
    Ok(data.with_split(split))
}

fn config_data(config: &Config) -> Result<DataSpec> {
    let d = &config.data;
    let seed = d.seed.unwrap_or(config.seed);
    Ok(match d.kind {
        DataKind::Blobs | DataKind::Xor => DataSpec::Synthetic {
            kind: if d.kind == DataKind::Blobs { SyntheticKind::Blobs } else { SyntheticKind::Xor },
            n: d.n.context("data.n missing")?,
            seed,
        },
        DataKind::Idx => {
            let p = d.paths.as_ref().context("data.paths missing")?;
            DataSpec::Idx {
                images: p.images.clone().into(),
                labels: p.labels.clone().into(),
            }
        }
    })
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Train {
            config,
            out,
            data,
            report,
        } => {
            let cfg = Config::from_file(&config)?;
            let mut model = build_model(&cfg)?;
            let spec = match data {
                Some(d) => d,
                None => config_data(&cfg)?,
            };
            let dataset = load_data(&spec, Split::Train)?;
            let start = Instant::now();
            let result = train(&mut model, &dataset, &cfg.train)?;
            eprintln!(
                "trained {} epochs on {} samples in {:.2}s",
                cfg.train.epochs,
                dataset.len(),
                start.elapsed().as_secs_f64()
            );
            save_checkpoint(&model, &out)?;
            let json = serde_json::to_string(&result)?;
            if let Some(path) = report {
                std::fs::write(&path, format!("{json}\n")).with_context(|| format!("writing {}", path.display()))?;
            }
            println!("{json}");
        }
        Command::Eval { model, data, mode } => {
            let m = load_checkpoint(&model)?;
            let dataset = load_data(&data, Split::Test)?;
            let mode = EvalMode::from(mode);
            let metrics = evaluate(&m, &dataset, mode)?;
            print_json(&serde_json::json!({
                "mode": mode.to_string(),
                "samples": dataset.len(),
                "accuracy": metrics.accuracy,
                "loss": metrics.loss,
            }));
        }
        Command::Quantize {
            model,
            bits,
            calib,
            out,
            scheme,
        } => {
            let fp32 = load_checkpoint(&model)?;
            let dataset = load_data(&calib, Split::Calib)?;
            let scheme = Scheme::from(scheme);
            let q = post_training_quantize(&fp32, &dataset, bits, scheme)?;
            save_checkpoint(&q, &out)?;
            let before = evaluate(&fp32, &dataset, EvalMode::Fake)?;
            let after = evaluate(&q, &dataset, EvalMode::Fake)?;
            print_json(&serde_json::json!({
                "bits": bits,
                "scheme": scheme.to_string(),
                "calib_samples": dataset.len(),
                "fp32_accuracy": before.accuracy,
                "quantized_accuracy": after.accuracy,
            }));
        }
        Command::Bench {
            op: Op::Gemm,
            size,
            m,
            k,
            n,
            reps,
            kernels,
            format,
            seed,
            append,
        } => {
            let dims = (m.unwrap_or(size), k.unwrap_or(size), n.unwrap_or(size));
            let kernels: Vec<Kernel> = kernels.into_iter().map(Kernel::from).collect();
            let report = bench::bench_gemm(dims, reps, &kernels, seed)?;
            let text = match format {
                Format::Csv => report.to_csv(true),
                Format::Json => report.to_json_lines(),
            };
            print!("{text}");
            if let Some(path) = append {
                append_report(&path, &report, format)?;
            }
        }
        Command::Pack { input, rows, cols, out } => {
            let bytes = std::fs::read(&input).with_context(|| format!("reading {}", input.display()))?;
            if rows == 0 || cols == 0 || bytes.len() != rows * cols * 4 {
                bail!(
                    "{} holds {} bytes; a {rows}×{cols} f32 matrix needs {}",
                    input.display(),
                    bytes.len(),
                    rows * cols * 4
                );
            }
            let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            let packed = pack_bits(&Tensor::new([rows, cols], data)?)?;
            let blob = packed.to_bytes();
            std::fs::write(&out, &blob).with_context(|| format!("writing {}", out.display()))?;
            print_json(&serde_json::json!({
                "rows": rows,
                "cols": cols,
                "bytes": blob.len(),
                "fp32_bytes": rows * cols * 4,
            }));
        }
        Command::Size { model, format } => {
            let report = bench::size_report(&model)?;
            match format {
                Format::Csv => print!("{}", report.to_csv()),
                Format::Json => print_json(&serde_json::to_value(&report)?),
            }
        }
    }
    Ok(())
}

fn append_report(path: &Path, report: &bench::BenchReport, format: Format) -> Result<()> {
    let fresh = std::fs::metadata(path).map_or(true, |m| m.len() == 0);
    let text = match format {
        Format::Csv => report.to_csv(fresh),
        Format::Json => report.to_json_lines(),
    };
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    f.write_all(text.as_bytes()).with_context(|| format!("appending to {}", path.display()))?;
    Ok(())
}
