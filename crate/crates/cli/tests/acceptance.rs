//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any fails.

use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use bq_core::autograd::{self, ste_backward, Graph};
use bq_core::bench::{bench_gemm, size_report, Kernel};
use bq_core::engine::checkpoint::Encoding;
use bq_core::engine::{
    build_model, evaluate, gen_synthetic, post_training_quantize, predict, save_checkpoint, train, Config,
    EvalMode, LayerSpec, Model, SyntheticKind,
};
use bq_core::{
    dequantize, fake_quantize, int8_gemm, matmul, pack_bits, quantize, xnor_gemm, QuantParams, Scheme, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FP32_CONFIG: &str = include_str!("../../../configs/blobs_fp32.json");
const W1A1_CONFIG: &str = include_str!("../../../configs/blobs_w1a1.json");

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn quantizer_suite() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut failures = Vec::new();
    let mut cases = 0;
    for bits in [1u8, 2, 4, 8] {
        for scheme in [Scheme::PaperLiteral, Scheme::Affine, Scheme::Symmetric] {
            let (l, u) = match scheme {
                Scheme::Symmetric => {
                    let u = rng.random_range(0.1f32..4.0);
                    (-u, u)
                }
                _ => (rng.random_range(-4.0f32..-0.1), rng.random_range(0.1f32..4.0)),
            };
            let p = QuantParams::per_tensor(bits, scheme, l, u).unwrap();
            let delta = p.range().unwrap().delta();
            let mut xs: Vec<f32> = (0..100_000).map(|_| rng.random_range(l..=u)).collect();
            xs.sort_by(f32::total_cmp);
            let x = Tensor::new([xs.len()], xs).unwrap();
            let q = quantize(&x, &p).unwrap();
            let y = dequantize(&q);
            let tag = format!("b={bits} {scheme}");
            let worst = x.data().iter().zip(y.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
            if worst > delta / 2.0 + 1e-6 {
                failures.push(format!("{tag}: error {worst} > Δ/2"));
            }
            let distinct: BTreeSet<u32> = y.data().iter().map(|v| v.to_bits()).collect();
            if distinct.len() > 1 << bits {
                failures.push(format!("{tag}: {} distinct outputs", distinct.len()));
            }
            if y.data().windows(2).any(|w| w[1] < w[0]) {
                failures.push(format!("{tag}: not monotone"));
            }
            if fake_quantize(&y, &p).unwrap() != y {
                failures.push(format!("{tag}: not idempotent"));
            }
            cases += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    if secs >= 10.0 {
        failures.push(format!("took {secs:.2}s"));
    }
    outcome(
        failures.is_empty(),
        format!("{cases} (b, scheme) cases x 1e5 samples in {secs:.2}s {}", failures.join("; ")),
    )
}

fn ste_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mismatches = 0;
    let mut elements = 0;
    for _ in 0..500 {
        let l = rng.random_range(-3.0f32..0.0);
        let u = rng.random_range(0.01f32..3.0);
        let n = rng.random_range(1..200);
        let mut x = random_tensor(&mut rng, &[1, n], l - 1.0, u + 1.0);
        x.data_mut()[0] = l;
        if n > 1 {
            x.data_mut()[1] = u;
        }
        let delta = random_tensor(&mut rng, &[1, n], -2.0, 2.0);
        let got = ste_backward(&delta, &x, l, u).unwrap();

        // Same rule through the autograd engine's fake-quant node.
        let params = QuantParams::per_tensor(4, Scheme::Affine, l, u).unwrap();
        let mut g = Graph::new();
        let input = g.input(0);
        let seed = g.constant(delta.clone());
        let fq = g.fake_quant(input, params);
        // d(fq · δᵀ)/d(fq) = δ, so the input gradient is δ through the STE.
        let weighted = g.matmul_nt(fq, seed);
        let loss = g.sum(weighted);
        let tape_mask = match autograd::forward(&g, loss, std::slice::from_ref(&x), &[]) {
            Ok((_, tape)) => autograd::backward(&tape, loss).ok().and_then(|gr| gr.inputs.get(&0).cloned()),
            Err(_) => None,
        };
        for i in 0..n {
            let xi = x.data()[i];
            let want = if xi > l && xi < u { delta.data()[i] } else { 0.0 };
            elements += 1;
            if got.data()[i].to_bits() != want.to_bits() {
                mismatches += 1;
            }
            if let Some(t) = &tape_mask {
                if t.data()[i].to_bits() != want.to_bits() {
                    mismatches += 1;
                }
            } else {
                mismatches += 1;
            }
        }
    }
    outcome(mismatches == 0, format!("{elements} elements, {mismatches} mismatches (direct and graph, boundaries included)"))
}

fn kernel_oracles() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut failures = 0;
    let mut non_multiple_k = 0;
    for _ in 0..200 {
        let (m, k, n) = (rng.random_range(1..=64), rng.random_range(1..=64), rng.random_range(1..=64));
        if k % 64 != 0 {
            non_multiple_k += 1;
        }
        let a = random_tensor(&mut rng, &[m, k], -1.0, 1.0);
        let b = random_tensor(&mut rng, &[k, n], -1.0, 1.0);
        let signs = |t: &Tensor| t.map(|v| if v >= 0.0 { 1.0 } else { -1.0 });
        let xnor = xnor_gemm(&pack_bits(&a).unwrap(), &pack_bits(&b.transpose().unwrap()).unwrap()).unwrap();
        if xnor.to_tensor() != matmul(&signs(&a), &signs(&b)).unwrap() {
            failures += 1;
        }

        // Power-of-two steps keep the dequantized product exact in FP32.
        for scheme in [Scheme::Symmetric, Scheme::PaperLiteral] {
            let step = |e: i32| 127.5 * 2f32.powi(-e);
            let pa = QuantParams::per_tensor(8, scheme, -step(7), step(7)).unwrap();
            let ranges: Vec<(f32, f32)> = (0..n).map(|j| (-step(5 + (j % 4) as i32), step(5 + (j % 4) as i32))).collect();
            let pb = QuantParams::per_channel(8, scheme, 1, &ranges).unwrap();
            let qa = quantize(&a, &pa).unwrap();
            let qb = quantize(&b, &pb).unwrap();
            let got = int8_gemm(&qa, &qb).unwrap();
            if got != matmul(&dequantize(&qa), &dequantize(&qb)).unwrap() {
                failures += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        failures == 0 && secs < 30.0,
        format!("200 shapes ({non_multiple_k} with k not a multiple of 64), {failures} mismatches, {secs:.2}s"),
    )
}

/// Random quantizer-free network mirrored in f64 for finite differences.
struct GradCase {
    conv: Option<(usize, usize)>,
    dims: Vec<usize>,
    relu: Vec<bool>,
    batch: usize,
    image: (usize, usize),
    labels: Vec<usize>,
}

fn relu64(v: f64) -> f64 {
    v.max(0.0)
}

impl GradCase {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let conv = rng.random_bool(0.4).then(|| (rng.random_range(1usize..=3), rng.random_range(0usize..=1)));
        let layers = rng.random_range(1..=if conv.is_some() { 2 } else { 3 });
        let batch = rng.random_range(1..=4);
        let image = (rng.random_range(1usize..=2), 4usize);
        let first = match conv {
            Some((oc, p)) => oc * (image.1 + 2 * p - 2).pow(2),
            None => rng.random_range(1..=16),
        };
        let mut dims = vec![first];
        for _ in 0..layers {
            dims.push(rng.random_range(2..=16));
        }
        let classes = *dims.last().unwrap();
        Self {
            conv,
            relu: (0..layers).map(|_| rng.random_bool(0.5)).collect(),
            labels: (0..batch).map(|_| rng.random_range(0..classes)).collect(),
            dims,
            batch,
            image,
        }
    }

    fn input_shape(&self) -> Vec<usize> {
        match self.conv {
            Some(_) => vec![self.batch, self.image.0, self.image.1, self.image.1],
            None => vec![self.batch, self.dims[0]],
        }
    }

    /// Parameter shapes in graph order.
    fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        if let Some((oc, _)) = self.conv {
            shapes.push(vec![oc, self.image.0, 3, 3]);
            shapes.push(vec![oc]);
        }
        for w in self.dims.windows(2) {
            shapes.push(vec![w[1], w[0]]);
            shapes.push(vec![w[1]]);
        }
        shapes
    }

    fn graph(&self) -> (Graph, usize) {
        let mut g = Graph::new();
        let mut h = g.input(0);
        let mut id = 0;
        if let Some((_, pad)) = self.conv {
            let (w, b) = (g.param(id), g.param(id + 1));
            id += 2;
            let c = g.conv2d(h, w, 1, pad);
            let c = g.add_bias(c, b);
            let r = g.relu(c);
            h = g.flatten(r);
        }
        for (i, _) in self.dims.windows(2).enumerate() {
            let (w, b) = (g.param(id), g.param(id + 1));
            id += 2;
            let y = g.matmul_nt(h, w);
            h = g.add_bias(y, b);
            if self.relu[i] && i + 2 < self.dims.len() {
                h = g.relu(h);
            }
        }
        let loss = g.cross_entropy(h, self.labels.clone());
        (g, loss)
    }

    /// f64 loss; `None` when a ReLU input sits too close to its kink for
    /// finite differences to be meaningful.
    fn loss64(&self, x: &[f64], params: &[Vec<f64>]) -> Option<f64> {
        const KINK: f64 = 1e-4;
        let mut id = 0;
        let mut h: Vec<f64>;
        let mut width;
        if let Some((oc, pad)) = self.conv {
            let (c, s) = self.image;
            let out = s + 2 * pad - 2;
            let (w, b) = (&params[0], &params[1]);
            id += 2;
            h = vec![0.0; self.batch * oc * out * out];
            for n in 0..self.batch {
                for o in 0..oc {
                    for oy in 0..out {
                        for ox in 0..out {
                            let mut acc = b[o];
                            for ic in 0..c {
                                for ky in 0..3 {
                                    for kx in 0..3 {
                                        let (y, xx) = ((oy + ky) as isize - pad as isize, (ox + kx) as isize - pad as isize);
                                        if y < 0 || xx < 0 || y >= s as isize || xx >= s as isize {
                                            continue;
                                        }
                                        acc += w[((o * c + ic) * 3 + ky) * 3 + kx]
                                            * x[((n * c + ic) * s + y as usize) * s + xx as usize];
                                    }
                                }
                            }
                            if acc.abs() < KINK {
                                return None;
                            }
                            h[((n * oc + o) * out + oy) * out + ox] = relu64(acc);
                        }
                    }
                }
            }
            width = oc * out * out;
        } else {
            h = x.to_vec();
            width = self.dims[0];
        }
        for (i, d) in self.dims.windows(2).enumerate() {
            let (w, b) = (&params[id], &params[id + 1]);
            id += 2;
            let mut next = vec![0.0; self.batch * d[1]];
            for n in 0..self.batch {
                for o in 0..d[1] {
                    let mut acc = b[o];
                    for p in 0..width {
                        acc += h[n * width + p] * w[o * width + p];
                    }
                    if self.relu[i] && i + 2 < self.dims.len() {
                        if acc.abs() < KINK {
                            return None;
                        }
                        acc = relu64(acc);
                    }
                    next[n * d[1] + o] = acc;
                }
            }
            h = next;
            width = d[1];
        }
        let mut total = 0.0;
        for n in 0..self.batch {
            let row = &h[n * width..(n + 1) * width];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            total += lse - row[self.labels[n]];
        }
        Some(total / self.batch as f64)
    }
}

fn central(f: impl Fn(f64) -> Option<f64>) -> Option<f64> {
    const H: f64 = 1e-6;
    Some((f(H)? - f(-H)?) / (2.0 * H))
}

fn max_rel_error(got: &Tensor, want: &[f64]) -> f64 {
    let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return got.data().iter().fold(0.0f64, |m, v| m.max(v.abs() as f64));
    }
    got.data().iter().zip(want).map(|(g, w)| (*g as f64 - w).abs()).fold(0.0, f64::max) / scale
}

fn gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut checked, mut worst, mut failures) = (0, 0.0f64, 0);
    while checked < 100 {
        let case = GradCase::random(&mut rng);
        let x = random_tensor(&mut rng, &case.input_shape(), -1.0, 1.0);
        let params: Vec<Tensor> = case.param_shapes().iter().map(|s| random_tensor(&mut rng, s, -0.8, 0.8)).collect();
        let x64: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
        let p64: Vec<Vec<f64>> = params.iter().map(|t| t.data().iter().map(|&v| v as f64).collect()).collect();
        if case.loss64(&x64, &p64).is_none() {
            continue;
        }
        let (g, loss) = case.graph();
        let (_, tape) = autograd::forward(&g, loss, std::slice::from_ref(&x), &params).unwrap();
        let grads = autograd::backward(&tape, loss).unwrap();

        let mut kinked = false;
        let mut errs = Vec::new();
        for (pid, shape) in case.param_shapes().iter().enumerate() {
            let len: usize = shape.iter().product();
            let mut fd = Vec::with_capacity(len);
            for i in 0..len {
                let f = |h: f64| {
                    let mut p = p64.clone();
                    p[pid][i] += h;
                    case.loss64(&x64, &p)
                };
                match central(f) {
                    Some(v) => fd.push(v),
                    None => kinked = true,
                }
            }
            if kinked {
                break;
            }
            errs.push(max_rel_error(&grads.params[&pid], &fd));
        }
        if !kinked {
            let fd: Option<Vec<f64>> = (0..x64.len())
                .map(|i| {
                    central(|h: f64| {
                        let mut xx = x64.clone();
                        xx[i] += h;
                        case.loss64(&xx, &p64)
                    })
                })
                .collect();
            match fd {
                Some(fd) => errs.push(max_rel_error(&grads.inputs[&0], &fd)),
                None => kinked = true,
            }
        }
        if kinked {
            continue;
        }
        let e = errs.iter().copied().fold(0.0, f64::max);
        worst = worst.max(e);
        if e > 1e-3 {
            failures += 1;
        }
        checked += 1;
    }
    outcome(failures == 0, format!("{checked} random graphs, worst max relative error {worst:.2e}"))
}

fn accuracy_of(model: &Model, data: &bq_core::Dataset) -> f64 {
    evaluate(model, data, EvalMode::Fake).unwrap().accuracy
}

fn qat_experiment(w1a1_out: &mut Option<(Model, bq_core::Dataset)>) -> Outcome {
    let start = Instant::now();
    let fp_cfg = Config::from_json(FP32_CONFIG).unwrap();
    let data = gen_synthetic(SyntheticKind::Blobs, fp_cfg.data.n.unwrap(), fp_cfg.data.seed.unwrap_or(fp_cfg.seed)).unwrap();

    let mut fp32 = build_model(&fp_cfg).unwrap();
    let report = train(&mut fp32, &data, &fp_cfg.train).unwrap();
    let fp_first = report.epochs.iter().find(|e| e.epoch >= 1 && e.accuracy >= 0.99).map(|e| e.epoch);
    let fp_acc = report.final_metrics().accuracy;

    let bin_cfg = Config::from_json(W1A1_CONFIG).unwrap();
    let specs = bin_cfg.layer_specs().unwrap();
    let mut w1a1 = build_model(&bin_cfg).unwrap();
    let bin_report = train(&mut w1a1, &data, &bin_cfg.train).unwrap();
    let bin_acc = bin_report.final_metrics().accuracy;

    let ptq = post_training_quantize(&fp32, &data, 8, Scheme::Symmetric).unwrap();
    let ptq_acc = accuracy_of(&ptq, &data);
    let secs = start.elapsed().as_secs_f64();

    let binary_layers = specs.iter().filter(|s| s.weight_bits == 1 && s.act_bits == 1).count();
    let pass = fp_first.is_some_and(|e| e <= 20)
        && bin_acc >= 0.90
        && binary_layers >= 1
        && (fp_acc - ptq_acc).abs() <= 0.01
        && secs < 60.0;
    *w1a1_out = Some((w1a1, data));
    outcome(
        pass,
        format!(
            "fp32 {:.2}% (>=99% at epoch {}), w1a1 {:.2}% ({binary_layers} binary layer), w8a8 ptq {:.2}%, {secs:.2}s",
            100.0 * fp_acc,
            fp_first.map_or("never".into(), |e| e.to_string()),
            100.0 * bin_acc,
            100.0 * ptq_acc,
        ),
    )
}

fn compression() -> Outcome {
    let specs = [LayerSpec::linear(1024, 1024).with_bits(1, 32), LayerSpec::linear(1024, 1024).with_bits(8, 32).with_scheme(Scheme::Symmetric)];
    let model = Model::new(&specs, 6, 0.9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.bq");
    save_checkpoint(&model, &path).unwrap();
    let report = size_report(&path).unwrap();
    let one = report.rows.iter().find(|r| r.encoding == Encoding::Bits).unwrap();
    let eight = report.rows.iter().find(|r| r.encoding == Encoding::Codes).unwrap();
    outcome(
        (31.5..=32.0).contains(&one.compression) && eight.compression == 4.0,
        format!("1-bit {:.4}x ({} bytes), 8-bit {:.4}x", one.compression, one.bytes, eight.compression),
    )
}

fn speedup() -> Outcome {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    match pool.install(|| bench_gemm((1024, 1024, 1024), 5, &Kernel::ALL, 7)) {
        Ok(r) => {
            let (int8, xnor) = (r.record(Kernel::Int8).unwrap(), r.record(Kernel::Xnor).unwrap());
            outcome(
                xnor.speedup_vs_fp32 >= 4.0 && xnor.median_s < int8.median_s && xnor.threads == 1,
                format!(
                    "1024^3 x5 reps, 1 thread, cross-checked: xnor {:.1}x, int8 {:.1}x vs fp32",
                    xnor.speedup_vs_fp32, int8.speedup_vs_fp32
                ),
            )
        }
        Err(e) => outcome(false, format!("bench failed: {e}")),
    }
}

fn dual_path(w1a1: &Option<(Model, bq_core::Dataset)>) -> Outcome {
    let Some((model, data)) = w1a1 else {
        return outcome(false, "no model from the QAT experiment");
    };
    let (fake_pred, fake) = predict(model, data, EvalMode::Fake).unwrap();
    let (int_pred, int) = match predict(model, data, EvalMode::Int) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("int path failed: {e}")),
    };
    let agree = fake_pred.iter().zip(&int_pred).filter(|(a, b)| a == b).count() as f64 / fake_pred.len() as f64;
    let worst = fake
        .data()
        .iter()
        .zip(int.data())
        .map(|(a, b)| {
            let scale = a.abs().max(b.abs());
            if scale == 0.0 { 0.0 } else { ((a - b).abs() / scale) as f64 }
        })
        .fold(0.0, f64::max);
    outcome(
        agree >= 0.999 && worst <= 1e-5,
        format!("label agreement {:.3}%, worst logit relative difference {worst:.2e}", 100.0 * agree),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("c.json");
    std::fs::write(&config, W1A1_CONFIG).unwrap();
    let run = |threads: &str, tag: &str| -> Option<(Vec<u8>, Vec<u8>, Vec<u8>)> {
        let out = dir.path().join(format!("{tag}.bq"));
        let report = dir.path().join(format!("{tag}.json"));
        let o = Command::new(env!("CARGO_BIN_EXE_bq"))
            .args(["--threads", threads, "train", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(&out)
            .arg("--report")
            .arg(&report)
            .output()
            .ok()?;
        if !o.status.success() {
            return None;
        }
        Some((o.stdout, read(&out)?, read(&report)?))
    };
    fn read(p: &Path) -> Option<Vec<u8>> {
        std::fs::read(p).ok()
    }
    let runs: Vec<_> = [("1", "a"), ("1", "b"), ("4", "c")].iter().map(|(t, n)| run(t, n)).collect();
    let ok = runs.iter().all(Option::is_some) && runs.windows(2).all(|w| w[0] == w[1]);
    outcome(ok, "three train runs (1, 1 and 4 threads): identical checkpoints, reports and stdout")
}

fn main() {
    let mut w1a1 = None;
    let results = [
        ("1", "quantizer correctness", quantizer_suite()),
        ("2", "STE exactness", ste_exactness()),
        ("3", "kernel oracle equivalence", kernel_oracles()),
        ("4", "gradient check", gradient_check()),
        ("5", "QAT desk-scale experiment", qat_experiment(&mut w1a1)),
        ("6", "compression", compression()),
        ("7", "speedup ordering", speedup()),
        ("8", "dual-path consistency", dual_path(&w1a1)),
        ("9", "determinism", determinism()),
    ];
    let mut failed = 0;
    for (id, name, o) in &results {
        println!("criterion {id} {}: {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
