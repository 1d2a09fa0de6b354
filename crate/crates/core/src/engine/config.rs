//! JSON run configuration and its resolution into layer specs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{Granularity, Scheme, MAX_BITS, MIN_BITS};

/// Bit-width meaning "not quantized".
pub const FULL_PRECISION: u8 = 32;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub model: Vec<LayerConfig>,
    #[serde(default)]
    pub quant: QuantConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKindName {
    Linear,
    Conv2d,
    Relu,
}

/// One `model[]` entry as written in the config file. Which fields are
/// allowed depends on `kind`; unset quantization fields fall back to the
/// `quant` section.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerConfig {
    pub kind: Option<LayerKindName>,
    #[serde(rename = "in", skip_serializing_if = "Option::is_none")]
    pub in_features: Option<usize>,
    #[serde(rename = "out", skip_serializing_if = "Option::is_none")]
    pub out_features: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub in_channels: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_channels: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kernel: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub padding: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight_bits: Option<u8>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub act_bits: Option<u8>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scheme: Option<Scheme>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub granularity: Option<Granularity>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub binary_scale: Option<bool>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantConfig {
    pub scheme: Scheme,
    pub ema_momentum: f32,
    pub weight_bits: u8,
    pub act_bits: u8,
    /// Bit-width kept at the network endpoints of binary configs.
    pub endpoint_bits: u8,
}

impl Default for QuantConfig {
    fn default() -> Self {
        QuantConfig {
            scheme: Scheme::Affine,
            ema_momentum: 0.9,
            weight_bits: FULL_PRECISION,
            act_bits: FULL_PRECISION,
            endpoint_bits: 8,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f32,
    pub epochs: usize,
    pub batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.1,
            epochs: 10,
            batch: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config("train.lr", "learning rate must be positive and finite"));
        }
        if self.batch == 0 {
            return Err(Error::config("train.batch", "batch size must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    Blobs,
    Xor,
    Idx,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxPaths {
    pub images: String,
    pub labels: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub kind: DataKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    /// Generator seed for synthetic data; defaults to the run seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paths: Option<IdxPaths>,
}

/// Layer type with its resolved shape parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum LayerKind {
    Linear {
        in_features: usize,
        out_features: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
}

/// Fully resolved layer: every quantization choice is explicit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub weight_bits: u8,
    pub act_bits: u8,
    pub scheme: Scheme,
    pub granularity: Granularity,
    /// Optional per-output-channel `mean|w|` multiplier for 1-bit weights.
    pub binary_scale: bool,
}

impl LayerSpec {
    pub fn linear(in_features: usize, out_features: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Linear {
                in_features,
                out_features,
            },
            ..Self::relu()
        }
    }

    pub fn conv2d(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            },
            ..Self::relu()
        }
    }

    pub fn relu() -> Self {
        LayerSpec {
            kind: LayerKind::Relu,
            weight_bits: FULL_PRECISION,
            act_bits: FULL_PRECISION,
            scheme: Scheme::Affine,
            granularity: Granularity::PerChannel { axis: 0 },
            binary_scale: false,
        }
    }

    pub fn with_bits(mut self, weight_bits: u8, act_bits: u8) -> Self {
        self.weight_bits = weight_bits;
        self.act_bits = act_bits;
        self
    }

    pub fn with_scheme(mut self, scheme: Scheme) -> Self {
        self.scheme = scheme;
        self
    }

    pub fn has_weights(&self) -> bool {
        !matches!(self.kind, LayerKind::Relu)
    }

    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            LayerKind::Linear { .. } => "linear",
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::Relu => "relu",
        }
    }

    /// Weight tensor shape, `[out, in]` or `[O, C, k, k]`.
    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match self.kind {
            LayerKind::Linear {
                in_features,
                out_features,
            } => Some(vec![out_features, in_features]),
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some(vec![out_channels, in_channels, kernel, kernel]),
            LayerKind::Relu => None,
        }
    }

    /// `(fan_in, fan_out)` for initialization.
    pub fn fans(&self) -> Option<(usize, usize)> {
        match self.kind {
            LayerKind::Linear {
                in_features,
                out_features,
            } => Some((in_features, out_features)),
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((in_channels * kernel * kernel, out_channels * kernel * kernel)),
            LayerKind::Relu => None,
        }
    }

    pub fn out_channels(&self) -> Option<usize> {
        self.weight_shape().map(|s| s[0])
    }

    pub fn is_quantized(&self) -> bool {
        self.weight_bits != FULL_PRECISION || self.act_bits != FULL_PRECISION
    }
}

pub(crate) fn check_bits(path: &str, bits: u8) -> Result<u8> {
    if (MIN_BITS..=MAX_BITS).contains(&bits) || bits == FULL_PRECISION {
        Ok(bits)
    } else {
        Err(Error::config(
            path,
            format!("bit-width {bits} must be in [{MIN_BITS}, {MAX_BITS}] or {FULL_PRECISION}"),
        ))
    }
}

impl Config {
    /// Parses a JSON document; errors carry the path of the offending field.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(if path.is_empty() { ".".into() } else { path }, e.into_inner().to_string())
        })
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Validates the whole document and resolves the layer list.
    pub fn layer_specs(&self) -> Result<Vec<LayerSpec>> {
        let q = &self.quant;
        check_bits("quant.weight_bits", q.weight_bits)?;
        check_bits("quant.act_bits", q.act_bits)?;
        check_bits("quant.endpoint_bits", q.endpoint_bits)?;
        if !(0.0..1.0).contains(&q.ema_momentum) {
            return Err(Error::config("quant.ema_momentum", "momentum must be in [0, 1)"));
        }
        self.train.validate()?;
        match (self.data.kind, &self.data.paths, self.data.n) {
            (DataKind::Idx, None, _) => {
                return Err(Error::config("data.paths", "idx data needs {images, labels} paths"))
            }
            (DataKind::Blobs | DataKind::Xor, _, None | Some(0)) => {
                return Err(Error::config("data.n", "synthetic data needs n >= 1"))
            }
            _ => {}
        }
        if self.model.is_empty() {
            return Err(Error::config("model", "model has no layers"));
        }

        let weight_layers: Vec<usize> = self
            .model
            .iter()
            .enumerate()
            .filter(|(_, l)| l.kind != Some(LayerKindName::Relu))
            .map(|(i, _)| i)
            .collect();
        let binary = q.weight_bits == 1 || q.act_bits == 1;
        let first = weight_layers.first().copied();
        // The last layer keeps endpoint precision only when a binary layer
        // would still remain in between.
        let last = (weight_layers.len() >= 3).then(|| weight_layers.last().copied()).flatten();

        let mut specs = Vec::with_capacity(self.model.len());
        for (i, l) in self.model.iter().enumerate() {
            let path = |field: &str| format!("model[{i}].{field}");
            let kind = l.kind.ok_or_else(|| Error::config(path("kind"), "missing layer kind"))?;
            let positive = |field: &str, v: Option<usize>| -> Result<usize> {
                match v {
                    Some(v) if v >= 1 => Ok(v),
                    Some(_) => Err(Error::config(path(field), "must be at least 1")),
                    None => Err(Error::config(path(field), "required for this layer kind")),
                }
            };
            let forbid = |field: &str, present: bool| -> Result<()> {
                if present {
                    Err(Error::config(path(field), format!("not valid for a {kind:?} layer")))
                } else {
                    Ok(())
                }
            };
            let conv_fields = [
                ("in_channels", l.in_channels.is_some()),
                ("out_channels", l.out_channels.is_some()),
                ("kernel", l.kernel.is_some()),
                ("stride", l.stride.is_some()),
                ("padding", l.padding.is_some()),
            ];
            let linear_fields = [("in", l.in_features.is_some()), ("out", l.out_features.is_some())];
            let quant_fields = [
                ("weight_bits", l.weight_bits.is_some()),
                ("act_bits", l.act_bits.is_some()),
                ("scheme", l.scheme.is_some()),
                ("granularity", l.granularity.is_some()),
                ("binary_scale", l.binary_scale.is_some()),
            ];
            let layer_kind = match kind {
                LayerKindName::Relu => {
                    for (f, p) in conv_fields.iter().chain(&linear_fields).chain(&quant_fields) {
                        forbid(f, *p)?;
                    }
                    specs.push(LayerSpec::relu());
                    continue;
                }
                LayerKindName::Linear => {
                    for (f, p) in &conv_fields {
                        forbid(f, *p)?;
                    }
                    LayerKind::Linear {
                        in_features: positive("in", l.in_features)?,
                        out_features: positive("out", l.out_features)?,
                    }
                }
                LayerKindName::Conv2d => {
                    for (f, p) in &linear_fields {
                        forbid(f, *p)?;
                    }
                    let stride = match l.stride {
                        None => 1,
                        s => positive("stride", s)?,
                    };
                    LayerKind::Conv2d {
                        in_channels: positive("in_channels", l.in_channels)?,
                        out_channels: positive("out_channels", l.out_channels)?,
                        kernel: positive("kernel", l.kernel)?,
                        stride,
                        padding: l.padding.unwrap_or(0),
                    }
                }
            };
            let is_first = Some(i) == first;
            let is_last = Some(i) == last;
            let default_weight = if binary && (is_first || is_last) { q.endpoint_bits } else { q.weight_bits };
            let default_act = if binary && is_first { q.endpoint_bits } else { q.act_bits };
            let weight_bits = check_bits(&path("weight_bits"), l.weight_bits.unwrap_or(default_weight))?;
            let act_bits = check_bits(&path("act_bits"), l.act_bits.unwrap_or(default_act))?;
            if act_bits == 1 && i > 0 && self.model[i - 1].kind == Some(LayerKindName::Relu) {
                return Err(Error::config(
                    path("act_bits"),
                    "1-bit activations directly after relu are constant (sign(0) = +1); \
                     drop the relu so the pre-activation is binarized",
                ));
            }
            let granularity = l.granularity.unwrap_or(Granularity::PerChannel { axis: 0 });
            if granularity != Granularity::PerTensor && granularity != (Granularity::PerChannel { axis: 0 }) {
                return Err(Error::config(
                    path("granularity"),
                    "weights are quantized per tensor or per output channel (axis 0)",
                ));
            }
            specs.push(LayerSpec {
                kind: layer_kind,
                weight_bits,
                act_bits,
                scheme: l.scheme.unwrap_or(q.scheme),
                granularity,
                binary_scale: l.binary_scale.unwrap_or(false),
            });
        }
        Ok(specs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Vec<LayerSpec>> {
        Config::from_json(text)?.layer_specs()
    }

    const DATA: &str = r#""data": {"kind": "blobs", "n": 10}"#;

    #[test]
    fn minimal_mlp() {
        let specs = parse(&format!(
            r#"{{"seed": 1, "model": [{{"kind": "linear", "in": 4, "out": 3}}], {DATA}}}"#
        ))
        .unwrap();
        assert_eq!(specs[0].weight_shape(), Some(vec![3, 4]));
        assert_eq!(specs[0].weight_bits, FULL_PRECISION);
    }

    #[test]
    fn zero_bits_names_the_field() {
        let err = parse(&format!(
            r#"{{"seed": 1, "model": [{{"kind": "relu"}}, {{"kind": "linear", "in": 4, "out": 3, "weight_bits": 0}}], {DATA}}}"#
        ))
        .unwrap_err();
        assert!(matches!(err, Error::Config { ref path, .. } if path == "model[1].weight_bits"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected_with_path() {
        let err = Config::from_json(&format!(
            r#"{{"seed": 1, "model": [{{"kind": "linear", "in": 4, "out": 3, "bogus": 1}}], {DATA}}}"#
        ))
        .unwrap_err();
        assert!(matches!(err, Error::Config { ref path, .. } if path.starts_with("model[0]")), "{err}");
        let err = Config::from_json(&format!(r#"{{"seed": 1, "model": [], "extra": 2, {DATA}}}"#)).unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
    }

    #[test]
    fn binary_endpoints() {
        let two = parse(&format!(
            r#"{{"seed": 1, "quant": {{"weight_bits": 1, "act_bits": 1}},
                "model": [{{"kind": "linear", "in": 2, "out": 8}}, {{"kind": "linear", "in": 8, "out": 2}}], {DATA}}}"#
        ))
        .unwrap();
        assert_eq!((two[0].weight_bits, two[0].act_bits), (8, 8));
        assert_eq!((two[1].weight_bits, two[1].act_bits), (1, 1));

        let three = parse(&format!(
            r#"{{"seed": 1, "quant": {{"weight_bits": 1, "act_bits": 1}},
                "model": [{{"kind": "linear", "in": 2, "out": 8}}, {{"kind": "linear", "in": 8, "out": 8}},
                          {{"kind": "linear", "in": 8, "out": 2, "weight_bits": 4}}], {DATA}}}"#
        ))
        .unwrap();
        assert_eq!((three[1].weight_bits, three[1].act_bits), (1, 1));
        assert_eq!((three[2].weight_bits, three[2].act_bits), (4, 1));
    }

    #[test]
    fn binarized_relu_output_is_rejected() {
        let err = parse(&format!(
            r#"{{"seed": 1, "model": [{{"kind": "linear", "in": 2, "out": 8}}, {{"kind": "relu"}},
                {{"kind": "linear", "in": 8, "out": 2, "act_bits": 1}}], {DATA}}}"#
        ))
        .unwrap_err();
        assert!(matches!(err, Error::Config { ref path, .. } if path == "model[2].act_bits"));
    }

    #[test]
    fn kind_specific_fields() {
        let err = parse(&format!(r#"{{"seed": 1, "model": [{{"kind": "relu", "in": 3}}], {DATA}}}"#)).unwrap_err();
        assert!(matches!(err, Error::Config { ref path, .. } if path == "model[0].in"));
        let err = parse(&format!(
            r#"{{"seed": 1, "model": [{{"kind": "conv2d", "in_channels": 1, "out_channels": 0, "kernel": 3}}], {DATA}}}"#
        ))
        .unwrap_err();
        assert!(matches!(err, Error::Config { ref path, .. } if path == "model[0].out_channels"));
    }

    #[test]
    fn data_and_train_validation() {
        let err = parse(r#"{"seed": 1, "model": [{"kind": "linear", "in": 1, "out": 1}], "data": {"kind": "idx"}}"#)
            .unwrap_err();
        assert!(matches!(err, Error::Config { ref path, .. } if path == "data.paths"));
        let err = parse(&format!(
            r#"{{"seed": 1, "model": [{{"kind": "linear", "in": 1, "out": 1}}], "train": {{"batch": 0}}, {DATA}}}"#
        ))
        .unwrap_err();
        assert!(matches!(err, Error::Config { ref path, .. } if path == "train.batch"));
    }
}
