use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::config::{Config, LayerKind, LayerSpec, FULL_PRECISION};
use crate::autograd::{self, Graph, NodeId, ParamId};
use crate::bitkernels::{int_gemm_nt, pack_rows, xnor_gemm, IntOperand};
use crate::error::{Error, Result};
use crate::quant::{self, binarize, calibrate_minmax, fake_quantize, Granularity, QuantParams};
use crate::tensor::{im2col, matmul_nt, ConvGeometry, Tensor};

/// Which arithmetic evaluates the quantized layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    /// Quantize-dequantize in FP32.
    Fake,
    /// Integer and XNOR-popcount kernels with an FP32 epilogue.
    Int,
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fake" | "fake-quant" => Ok(EvalMode::Fake),
            "int" | "integer-kernel" => Ok(EvalMode::Int),
            other => Err(Error::arg(format!("unknown eval mode `{other}` (expected fake or int)"))),
        }
    }
}

impl std::fmt::Display for EvalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EvalMode::Fake => "fake",
            EvalMode::Int => "int",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub(crate) weight: Option<ParamId>,
    pub(crate) bias: Option<ParamId>,
    /// Running activation range, present once calibrated.
    pub act_params: Option<QuantParams>,
    /// Weight params fixed by PTQ or a checkpoint load. Absent during QAT,
    /// where ranges follow the latent weights.
    pub weight_params: Option<QuantParams>,
    /// Frozen per-channel scale of binary weights (see `LayerSpec::binary_scale`).
    pub frozen_scale: Option<Tensor>,
}

impl Layer {
    pub(crate) fn quantizes_acts(&self) -> bool {
        self.spec.has_weights() && self.spec.act_bits < FULL_PRECISION && self.spec.act_bits > 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub(crate) layers: Vec<Layer>,
    pub(crate) params: Vec<Tensor>,
    pub seed: u64,
    pub ema_momentum: f32,
}

pub(crate) struct Built {
    pub graph: Graph,
    pub logits: NodeId,
    pub loss: Option<NodeId>,
    /// Input node of each weight layer, before any activation quantization.
    pub layer_inputs: Vec<(usize, NodeId)>,
}

/// Builds and initializes the model described by a validated config.
pub fn build_model(config: &Config) -> Result<Model> {
    Model::new(&config.layer_specs()?, config.seed, config.quant.ema_momentum)
}

fn check_chain(specs: &[LayerSpec]) -> Result<()> {
    let mut width: Option<usize> = None;
    let mut channels: Option<usize> = None;
    for (i, s) in specs.iter().enumerate() {
        match s.kind {
            LayerKind::Linear {
                in_features,
                out_features,
            } => {
                if let Some(w) = width.filter(|&w| w != in_features) {
                    return Err(Error::config(
                        format!("model[{i}].in"),
                        format!("previous layer produces {w} features"),
                    ));
                }
                width = Some(out_features);
                channels = None;
            }
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                ..
            } => {
                if width.is_some() {
                    return Err(Error::config(format!("model[{i}].kind"), "conv2d cannot follow a linear layer"));
                }
                if let Some(c) = channels.filter(|&c| c != in_channels) {
                    return Err(Error::config(
                        format!("model[{i}].in_channels"),
                        format!("previous layer produces {c} channels"),
                    ));
                }
                channels = Some(out_channels);
            }
            LayerKind::Relu => {}
        }
    }
    Ok(())
}

fn weight_quant_dims(w: &Tensor) -> Result<Tensor> {
    let rows = w.shape()[0];
    w.reshape([rows, w.numel() / rows])
}

impl Model {
    /// Fresh model; weights are uniform in `±sqrt(6 / (fan_in + fan_out))`,
    /// biases zero.
    pub fn new(specs: &[LayerSpec], seed: u64, ema_momentum: f32) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::config("model", "model has no layers"));
        }
        check_chain(specs)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut layers = Vec::with_capacity(specs.len());
        for spec in specs {
            let (weight, bias) = match (spec.weight_shape(), spec.fans()) {
                (Some(shape), Some((fan_in, fan_out))) => {
                    let a = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
                    let dist = Uniform::new_inclusive(-a, a).map_err(|e| Error::arg(e.to_string()))?;
                    let out = shape[0];
                    params.push(Tensor::from_fn(shape, |_| dist.sample(&mut rng)));
                    params.push(Tensor::zeros([out]));
                    (Some(params.len() - 2), Some(params.len() - 1))
                }
                _ => (None, None),
            };
            layers.push(Layer {
                spec: *spec,
                weight,
                bias,
                act_params: None,
                weight_params: None,
                frozen_scale: None,
            });
        }
        Ok(Model {
            layers,
            params,
            seed,
            ema_momentum,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn weight(&self, layer: usize) -> Option<&Tensor> {
        self.layers.get(layer)?.weight.map(|id| &self.params[id])
    }

    pub fn bias(&self, layer: usize) -> Option<&Tensor> {
        self.layers.get(layer)?.bias.map(|id| &self.params[id])
    }

    pub(crate) fn weight_mut(&mut self, layer: usize) -> Option<&mut Tensor> {
        let id = self.layers.get(layer)?.weight?;
        Some(&mut self.params[id])
    }

    pub(crate) fn bias_mut(&mut self, layer: usize) -> Option<&mut Tensor> {
        let id = self.layers.get(layer)?.bias?;
        Some(&mut self.params[id])
    }

    /// True when every layer runs in full precision.
    pub fn is_fp32(&self) -> bool {
        self.layers.iter().all(|l| !l.spec.is_quantized())
    }

    /// Drops frozen weight params so quantization follows the latent weights.
    pub(crate) fn unfreeze(&mut self) {
        for l in &mut self.layers {
            l.weight_params = None;
            l.frozen_scale = None;
        }
    }

    fn weight_granularity(spec: &LayerSpec) -> Granularity {
        spec.granularity
    }

    /// Params quantizing the weights of `layer` in their current state.
    pub fn weight_quant_params(&self, layer: usize) -> Result<Option<QuantParams>> {
        let l = &self.layers[layer];
        let bits = l.spec.weight_bits;
        if !l.spec.has_weights() || bits == FULL_PRECISION || bits == 1 {
            return Ok(None);
        }
        if let Some(p) = &l.weight_params {
            return Ok(Some(p.clone()));
        }
        let w = self.weight(layer).expect("weight layer");
        calibrate_minmax(std::slice::from_ref(w), bits, l.spec.scheme, Self::weight_granularity(&l.spec)).map(Some)
    }

    /// `mean|w|` per output channel for scaled binary layers.
    pub fn binary_scale(&self, layer: usize) -> Option<Tensor> {
        let l = &self.layers[layer];
        if !(l.spec.binary_scale && l.spec.weight_bits == 1) {
            return None;
        }
        if let Some(s) = &l.frozen_scale {
            return Some(s.clone());
        }
        let w = self.weight(layer)?;
        let rows = w.shape()[0];
        let per = w.numel() / rows;
        Some(Tensor::from_fn([rows], |r| {
            let sum: f64 = w.data()[r * per..(r + 1) * per].iter().map(|v| v.abs() as f64).sum();
            (sum / per as f64) as f32
        }))
    }

    /// Fake-quant graph of the whole network. With `labels`, a mean
    /// cross-entropy loss node is added. Uncalibrated activation quantizers
    /// are an error unless `allow_uncalibrated`, in which case they pass
    /// values through.
    pub(crate) fn graph(&self, labels: Option<Vec<usize>>, allow_uncalibrated: bool) -> Result<Built> {
        let mut g = Graph::new();
        let mut h = g.input(0);
        let mut layer_inputs = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            let spec = &l.spec;
            let (stride, padding) = match spec.kind {
                LayerKind::Relu => {
                    h = g.relu(h);
                    continue;
                }
                LayerKind::Linear { .. } => {
                    h = g.flatten(h);
                    (0, 0)
                }
                LayerKind::Conv2d { stride, padding, .. } => (stride, padding),
            };
            layer_inputs.push((i, h));

            let mut conv_padding = padding;
            let x = match spec.act_bits {
                FULL_PRECISION => h,
                1 => {
                    if padding > 0 {
                        let padded = g.pad(h, padding, 0.0);
                        conv_padding = 0;
                        g.binarize(padded)
                    } else {
                        g.binarize(h)
                    }
                }
                _ => match &l.act_params {
                    Some(p) => g.fake_quant(h, p.clone()),
                    None if allow_uncalibrated => h,
                    None => {
                        return Err(Error::State(format!("activation range of layer {i} is not calibrated")))
                    }
                },
            };

            let w_node = g.param(l.weight.expect("weight layer"));
            let w = match spec.weight_bits {
                FULL_PRECISION => w_node,
                1 => g.binarize(w_node),
                bits => match &l.weight_params {
                    Some(p) => g.fake_quant(w_node, p.clone()),
                    None => g.fake_quant_minmax(w_node, bits, spec.scheme, Self::weight_granularity(spec)),
                },
            };

            let mut y = match spec.kind {
                LayerKind::Linear { .. } => g.matmul_nt(x, w),
                _ => g.conv2d(x, w, stride, conv_padding),
            };
            if let Some(alpha) = self.binary_scale(i) {
                let a = g.constant(alpha);
                y = g.channel_scale(y, a);
            }
            let b = g.param(l.bias.expect("weight layer"));
            h = g.add_bias(y, b);
        }
        let loss = labels.map(|labels| g.cross_entropy(h, labels));
        Ok(Built {
            graph: g,
            logits: h,
            loss,
            layer_inputs,
        })
    }

    /// Logits of a batch under the given arithmetic.
    pub fn logits(&self, x: &Tensor, mode: EvalMode) -> Result<Tensor> {
        match mode {
            EvalMode::Fake => {
                let built = self.graph(None, false)?;
                let (out, _) = autograd::forward(&built.graph, built.logits, std::slice::from_ref(x), &self.params)?;
                Ok(out)
            }
            EvalMode::Int => self.int_logits(x),
        }
    }

    /// Inputs seen by each weight layer (pre-quantization) on a batch,
    /// together with the logits.
    pub(crate) fn layer_inputs(&self, x: &Tensor, allow_uncalibrated: bool) -> Result<(Tensor, Vec<(usize, Tensor)>)> {
        let built = self.graph(None, allow_uncalibrated)?;
        let (out, tape) = autograd::forward(&built.graph, built.logits, std::slice::from_ref(x), &self.params)?;
        let inputs = built
            .layer_inputs
            .iter()
            .map(|&(i, node)| (i, tape.value(node).expect("evaluated").clone()))
            .collect();
        Ok((out, inputs))
    }

    /// Min/max-initializes every missing activation range from one batch,
    /// layer by layer so each range sees the quantized layers before it.
    pub(crate) fn calibrate_missing_acts(&mut self, x: &Tensor) -> Result<()> {
        loop {
            let Some(next) = self.layers.iter().position(|l| l.quantizes_acts() && l.act_params.is_none()) else {
                return Ok(());
            };
            let (_, inputs) = self.layer_inputs(x, true)?;
            let sample = &inputs.iter().find(|(i, _)| *i == next).expect("weight layer input").1;
            let spec = self.layers[next].spec;
            self.layers[next].act_params =
                Some(calibrate_minmax(std::slice::from_ref(sample), spec.act_bits, spec.scheme, Granularity::PerTensor)?);
        }
    }

    fn check_int_support(&self) -> Result<()> {
        for (i, l) in self.layers.iter().enumerate() {
            let s = &l.spec;
            let multi_bit = |b: u8| b > 1 && b < FULL_PRECISION;
            if s.has_weights() && (multi_bit(s.weight_bits) || multi_bit(s.act_bits)) && !s.scheme.is_zero_point_free() {
                return Err(Error::UnsupportedScheme(format!(
                    "layer {i} uses the {} scheme, which has no integer kernel; evaluate with the fake-quant mode",
                    s.scheme
                )));
            }
        }
        Ok(())
    }

    fn int_logits(&self, x: &Tensor) -> Result<Tensor> {
        self.check_int_support()?;
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            h = match l.spec.kind {
                LayerKind::Relu => h.relu(),
                LayerKind::Linear { .. } => {
                    let n = h.shape()[0];
                    let flat = h.reshape([n, h.numel() / n])?;
                    self.int_linear(i, &flat)?
                }
                LayerKind::Conv2d { stride, padding, .. } => self.int_conv(i, &h, stride, padding)?,
            };
        }
        Ok(h)
    }

    /// Weight operand `[out × fan_in]`, or `None` for full precision.
    fn weight_operand(&self, layer: usize) -> Result<Option<Operand>> {
        let spec = self.layers[layer].spec;
        let w = weight_quant_dims(self.weight(layer).expect("weight layer"))?;
        let (rows, cols) = w.dims2()?;
        Ok(match spec.weight_bits {
            FULL_PRECISION => None,
            1 => Some(Operand::signs(w.data(), rows, cols)),
            _ => {
                let params = self.weight_quant_params(layer)?.expect("multi-bit weights");
                Some(Operand::Int(IntOperand::from_rows(&quant::quantize(&w, &params)?)?))
            }
        })
    }

    /// Quantized FP32 weights as the fake path sees them, `[out × fan_in]`.
    fn weight_dequantized(&self, layer: usize) -> Result<Tensor> {
        let spec = self.layers[layer].spec;
        let w = self.weight(layer).expect("weight layer");
        let q = match spec.weight_bits {
            FULL_PRECISION => w.clone(),
            1 => binarize(w),
            _ => fake_quantize(w, &self.weight_quant_params(layer)?.expect("multi-bit weights"))?,
        };
        weight_quant_dims(&q)
    }

    fn act_params(&self, layer: usize) -> Result<&QuantParams> {
        self.layers[layer]
            .act_params
            .as_ref()
            .ok_or_else(|| Error::State(format!("activation range of layer {layer} is not calibrated")))
    }

    /// Activation operand of a `[rows × k]` matrix.
    fn act_operand(&self, layer: usize, a: &Tensor) -> Result<Option<Operand>> {
        let (rows, cols) = a.dims2()?;
        Ok(match self.layers[layer].spec.act_bits {
            FULL_PRECISION => None,
            1 => Some(Operand::signs(a.data(), rows, cols)),
            _ => Some(Operand::Int(IntOperand::from_rows(&quant::quantize(a, self.act_params(layer)?)?)?)),
        })
    }

    fn act_dequantized(&self, layer: usize, a: &Tensor) -> Result<Tensor> {
        Ok(match self.layers[layer].spec.act_bits {
            FULL_PRECISION => a.clone(),
            1 => binarize(a),
            _ => fake_quantize(a, self.act_params(layer)?)?,
        })
    }

    /// `[m × out]` pre-epilogue product of activations and weights.
    fn product(&self, layer: usize, a: &Tensor) -> Result<Tensor> {
        match (self.act_operand(layer, a)?, self.weight_operand(layer)?) {
            (Some(x), Some(w)) => x.gemm_nt(&w),
            _ => matmul_nt(&self.act_dequantized(layer, a)?, &self.weight_dequantized(layer)?),
        }
    }

    /// Per-channel binary scale and bias applied to `[m × out]`.
    fn epilogue(&self, layer: usize, y: &mut Tensor) {
        let alpha = self.binary_scale(layer);
        let bias = self.bias(layer).expect("weight layer");
        let out = bias.numel();
        for row in y.data_mut().chunks_mut(out) {
            for (j, v) in row.iter_mut().enumerate() {
                if let Some(a) = &alpha {
                    *v *= a.data()[j];
                }
                *v += bias.data()[j];
            }
        }
    }

    fn int_linear(&self, layer: usize, a: &Tensor) -> Result<Tensor> {
        let mut y = self.product(layer, a)?;
        self.epilogue(layer, &mut y);
        Ok(y)
    }

    fn int_conv(&self, layer: usize, x: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let weight = self.weight(layer).expect("weight layer");
        let (o, _, kh, kw) = weight.dims4()?;
        let g = ConvGeometry::new((c, h, w), (kh, kw), stride, padding)?;
        let (patch, pixels) = (g.patch_len(), g.out_pixels());
        let spec = self.layers[layer].spec;
        let weight_op = self.weight_operand(layer)?;
        let weight_fq = match &weight_op {
            None => Some(self.weight_dequantized(layer)?),
            Some(_) => None,
        };
        let image_len = c * h * w;
        let mut out = vec![0.0f32; n * o * pixels];
        for (img, dst) in x.data().chunks(image_len).zip(out.chunks_mut(o * pixels)) {
            let img_t = Tensor::new([1, image_len], img.to_vec())?;
            // Rows are output pixels, columns patch taps.
            let y = match (spec.act_bits, &weight_op) {
                (FULL_PRECISION, _) | (_, None) => {
                    let deq = self.act_dequantized(layer, &Tensor::new([c, h, w], img.to_vec())?)?;
                    // Binarized inputs pad with sign(0) = +1.
                    let pad = if spec.act_bits == 1 { 1.0 } else { 0.0 };
                    let cols = transpose_cols(&im2col(deq.data(), &g, pad), patch, pixels);
                    let wt = match &weight_fq {
                        Some(wt) => wt.clone(),
                        None => self.weight_dequantized(layer)?,
                    };
                    matmul_nt(&Tensor::new([pixels, patch], cols)?, &wt)?
                }
                (1, Some(wop)) => {
                    let signs = binarize(&img_t);
                    let cols = transpose_cols(&im2col(signs.data(), &g, 1.0), patch, pixels);
                    Operand::signs(&cols, pixels, patch).gemm_nt(wop)?
                }
                (_, Some(wop)) => {
                    let q = IntOperand::from_rows(&quant::quantize(&img_t, self.act_params(layer)?)?)?;
                    let values = transpose_cols(&im2col(&q.values, &g, 0i16), patch, pixels);
                    let a = IntOperand {
                        rows: pixels,
                        cols: patch,
                        values,
                        row_scale: vec![q.row_scale[0]; pixels],
                    };
                    Operand::Int(a).gemm_nt(wop)?
                }
            };
            let mut y = y;
            self.epilogue(layer, &mut y);
            for (p, row) in y.data().chunks(o).enumerate() {
                for (oc, &v) in row.iter().enumerate() {
                    dst[oc * pixels + p] = v;
                }
            }
        }
        Tensor::new([n, o, g.out_h, g.out_w], out)
    }
}

fn transpose_cols<T: Copy>(cols: &[T], rows: usize, pixels: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(cols.len());
    for p in 0..pixels {
        out.extend((0..rows).map(|r| cols[r * pixels + p]));
    }
    out
}

/// One side of an integer product.
enum Operand {
    Bits(crate::bitkernels::BitTensor),
    Int(IntOperand),
}

impl Operand {
    fn signs(data: &[f32], rows: usize, cols: usize) -> Self {
        Operand::Bits(pack_rows(data, rows, cols))
    }

    fn to_int(&self) -> IntOperand {
        match self {
            Operand::Int(op) => op.clone(),
            Operand::Bits(b) => {
                let values = crate::bitkernels::unpack_bits(b).data().iter().map(|&v| v as i16).collect();
                IntOperand {
                    rows: b.rows(),
                    cols: b.cols(),
                    values,
                    row_scale: vec![1.0; b.rows()],
                }
            }
        }
    }

    fn gemm_nt(&self, b_t: &Operand) -> Result<Tensor> {
        match (self, b_t) {
            (Operand::Bits(a), Operand::Bits(b)) => Ok(xnor_gemm(a, b)?.to_tensor()),
            _ => int_gemm_nt(&self.to_int(), &b_t.to_int()),
        }
    }
}
