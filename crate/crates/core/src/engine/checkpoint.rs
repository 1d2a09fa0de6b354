//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "BQCK" | version: u8 = 1 | manifest length: u64 | manifest (JSON) | blobs
//! ```
//!
//! Tensor entries in the manifest locate their blob by `offset`/`length`
//! relative to the start of the blob section. FP32 tensors are raw
//! IEEE-754 floats, multi-bit weights are codes bit-packed LSB-first at
//! `bits` bits per element (stored minus the channel's lowest grid code),
//! and 1-bit weights are [`BitTensor`] blobs.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{LayerSpec, FULL_PRECISION};
use super::model::Model;
use crate::bitkernels::{pack_rows, unpack_bits, BitTensor};
use crate::error::{Error, Result};
use crate::quant::{self, dequantize, Granularity, QTensor, QuantParams, Scheme};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"BQCK";
pub const VERSION: u8 = 1;
/// Bytes before the manifest.
pub const PREAMBLE_LEN: u64 = 13;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Encoding {
    Fp32,
    Codes,
    Bits,
}

impl std::fmt::Display for Encoding {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Encoding::Fp32 => "fp32",
            Encoding::Codes => "codes",
            Encoding::Bits => "bits",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantEntry {
    pub scheme: Scheme,
    pub bits: u8,
    pub granularity: Granularity,
    pub ranges: Vec<[f32; 2]>,
}

impl QuantEntry {
    fn from_params(p: &QuantParams) -> Self {
        QuantEntry {
            scheme: p.scheme(),
            bits: p.bits(),
            granularity: p.granularity(),
            ranges: p.bounds().into_iter().map(|(l, u)| [l, u]).collect(),
        }
    }

    fn to_params(&self) -> Result<QuantParams> {
        let ranges: Vec<(f32, f32)> = self.ranges.iter().map(|r| (r[0], r[1])).collect();
        QuantParams::from_ranges(self.bits, self.scheme, self.granularity, &ranges)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
    pub encoding: Encoding,
    pub bits: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quant: Option<QuantEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerEntry {
    pub spec: LayerSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub act_quant: Option<QuantEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub seed: u64,
    pub ema_momentum: f32,
    pub layers: Vec<LayerEntry>,
}

/// Packs values `< 2^bits` LSB-first.
fn pack_codes(values: &[u32], bits: u8) -> Vec<u8> {
    let bits = bits as usize;
    let mut out = vec![0u8; (values.len() * bits).div_ceil(8)];
    for (i, &v) in values.iter().enumerate() {
        for b in 0..bits {
            if (v >> b) & 1 == 1 {
                let pos = i * bits + b;
                out[pos / 8] |= 1 << (pos % 8);
            }
        }
    }
    out
}

fn unpack_codes(bytes: &[u8], n: usize, bits: u8) -> Vec<u32> {
    let bits = bits as usize;
    (0..n)
        .map(|i| {
            (0..bits).fold(0u32, |acc, b| {
                let pos = i * bits + b;
                acc | ((((bytes[pos / 8] >> (pos % 8)) & 1) as u32) << b)
            })
        })
        .collect()
}

fn fp32_bytes(t: &Tensor) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

struct Blobs {
    data: Vec<u8>,
}

impl Blobs {
    fn push(&mut self, shape: &[usize], encoding: Encoding, bits: u8, quant: Option<QuantEntry>, bytes: Vec<u8>) -> TensorEntry {
        let entry = TensorEntry {
            shape: shape.to_vec(),
            offset: self.data.len() as u64,
            length: bytes.len() as u64,
            encoding,
            bits,
            quant,
        };
        self.data.extend_from_slice(&bytes);
        entry
    }

    fn fp32(&mut self, t: &Tensor) -> TensorEntry {
        self.push(t.shape(), Encoding::Fp32, FULL_PRECISION, None, fp32_bytes(t))
    }
}

/// Serializes a model. Multi-bit weights are stored on their grid, so a
/// live QAT model is saved exactly as its fake-quant forward sees it.
pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let mut blobs = Blobs { data: Vec::new() };
    let mut layers = Vec::with_capacity(model.layers().len());
    for (i, layer) in model.layers().iter().enumerate() {
        let spec = layer.spec;
        let mut entry = LayerEntry {
            spec,
            weight: None,
            bias: None,
            scale: None,
            act_quant: layer.act_params.as_ref().map(QuantEntry::from_params),
        };
        if let Some(w) = model.weight(i) {
            let rows = w.shape()[0];
            let cols = w.numel() / rows;
            entry.weight = Some(match spec.weight_bits {
                FULL_PRECISION => blobs.fp32(w),
                1 => blobs.push(w.shape(), Encoding::Bits, 1, None, pack_rows(w.data(), rows, cols).to_bytes()),
                bits => {
                    let params = model.weight_quant_params(i)?.expect("multi-bit weights");
                    let q = quant::quantize(w, &params)?;
                    let map = params.channel_map(w.shape())?;
                    let offsets: Vec<u32> = q
                        .codes()
                        .iter()
                        .enumerate()
                        .map(|(j, &c)| (c - params.ranges()[map.channel(j)].code_bounds().0) as u32)
                        .collect();
                    blobs.push(
                        w.shape(),
                        Encoding::Codes,
                        bits,
                        Some(QuantEntry::from_params(&params)),
                        pack_codes(&offsets, bits),
                    )
                }
            });
            entry.bias = model.bias(i).map(|b| blobs.fp32(b));
            entry.scale = model.binary_scale(i).map(|s| blobs.fp32(&s));
        }
        layers.push(entry);
    }
    let manifest = Manifest {
        seed: model.seed,
        ema_momentum: model.ema_momentum,
        layers,
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| Error::arg(format!("manifest serialization: {e}")))?;
    let mut out = Vec::with_capacity(PREAMBLE_LEN as usize + json.len() + blobs.data.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blobs.data);
    Ok(out)
}

/// Writes atomically: a temporary file in the target directory is renamed
/// over `path`.
pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(&bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Byte offset of a serde_json error position within the manifest.
fn json_error_offset(json: &[u8], e: &serde_json::Error) -> u64 {
    let (line, col) = (e.line(), e.column());
    let mut offset = 0usize;
    for (i, l) in json.split(|&b| b == b'\n').enumerate() {
        if i + 1 == line {
            return PREAMBLE_LEN + (offset + col.saturating_sub(1)).min(json.len()) as u64;
        }
        offset += l.len() + 1;
    }
    PREAMBLE_LEN + json.len() as u64
}

/// Splits a checkpoint into its manifest and blob section.
pub fn parse_header(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::format(0, "not a checkpoint (bad magic)"));
    }
    match bytes.get(4) {
        Some(&VERSION) => {}
        Some(v) => return Err(Error::format(4, format!("unsupported checkpoint version {v}"))),
        None => return Err(Error::format(4, "truncated before version byte")),
    }
    let len = bytes
        .get(5..13)
        .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::format(5, "truncated manifest length"))?;
    let end = PREAMBLE_LEN
        .checked_add(len)
        .filter(|&e| e <= bytes.len() as u64)
        .ok_or_else(|| Error::format(bytes.len() as u64, format!("manifest of {len} bytes is truncated")))?;
    let json = &bytes[PREAMBLE_LEN as usize..end as usize];
    let manifest: Manifest = serde_json::from_slice(json)
        .map_err(|e| Error::format(json_error_offset(json, &e), format!("bad manifest: {e}")))?;
    Ok((manifest, &bytes[end as usize..]))
}

/// Manifest and total size of a checkpoint file.
pub fn read_manifest(path: &Path) -> Result<(Manifest, u64)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (manifest, blobs) = parse_header(&bytes)?;
    let base = bytes.len() - blobs.len();
    for layer in &manifest.layers {
        for entry in [&layer.weight, &layer.bias, &layer.scale].into_iter().flatten() {
            blob(blobs, base as u64, entry)?;
        }
    }
    Ok((manifest, bytes.len() as u64))
}

fn blob<'a>(blobs: &'a [u8], base: u64, entry: &TensorEntry) -> Result<&'a [u8]> {
    let end = entry.offset.checked_add(entry.length).filter(|&e| e <= blobs.len() as u64);
    match end {
        Some(end) => Ok(&blobs[entry.offset as usize..end as usize]),
        None => Err(Error::format(
            base + entry.offset.min(blobs.len() as u64),
            format!("blob of {} bytes at offset {} runs past the end of the file", entry.length, entry.offset),
        )),
    }
}

fn read_fp32(blobs: &[u8], base: u64, entry: &TensorEntry, shape: &[usize]) -> Result<Tensor> {
    let at = base + entry.offset;
    if entry.encoding != Encoding::Fp32 || entry.shape != shape {
        return Err(Error::format(at, format!("expected an fp32 tensor of shape {shape:?}, found {:?}", entry.shape)));
    }
    let bytes = blob(blobs, base, entry)?;
    let numel: usize = shape.iter().product();
    if bytes.len() != 4 * numel {
        return Err(Error::format(at, format!("fp32 blob has {} bytes, shape needs {}", bytes.len(), 4 * numel)));
    }
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Tensor::new(shape, data)
}

fn read_weight(blobs: &[u8], base: u64, entry: &TensorEntry, spec: &LayerSpec) -> Result<(Tensor, Option<QuantParams>)> {
    let shape = spec.weight_shape().expect("weight layer");
    let at = base + entry.offset;
    if entry.shape != shape || entry.bits != spec.weight_bits {
        return Err(Error::format(
            at,
            format!("weight entry {:?} at {} bits does not match the layer spec", entry.shape, entry.bits),
        ));
    }
    match entry.encoding {
        Encoding::Fp32 => Ok((read_fp32(blobs, base, entry, &shape)?, None)),
        Encoding::Bits => {
            let b = BitTensor::from_bytes(blob(blobs, base, entry)?, at)?;
            let rows = shape[0];
            if b.rows() != rows || b.rows() * b.cols() != shape.iter().product::<usize>() {
                return Err(Error::format(at, "bit blob dimensions do not match the weight shape"));
            }
            Ok((unpack_bits(&b).reshape(shape)?, None))
        }
        Encoding::Codes => {
            let q = entry
                .quant
                .as_ref()
                .ok_or_else(|| Error::format(at, "code blob without quantization params"))?;
            let params = q.to_params().map_err(|e| Error::format(at, e.to_string()))?;
            if params.bits() != entry.bits {
                return Err(Error::format(at, "code blob bit-width differs from its params"));
            }
            let bytes = blob(blobs, base, entry)?;
            let numel: usize = shape.iter().product();
            if bytes.len() != (numel * entry.bits as usize).div_ceil(8) {
                return Err(Error::format(at, format!("code blob has {} bytes for {numel} codes", bytes.len())));
            }
            let map = params.channel_map(&shape).map_err(|e| Error::format(at, e.to_string()))?;
            let codes = unpack_codes(bytes, numel, entry.bits)
                .into_iter()
                .enumerate()
                .map(|(j, v)| params.ranges()[map.channel(j)].code_bounds().0 + v as i32)
                .collect();
            let q = QTensor::from_codes(codes, shape, params.clone()).map_err(|e| Error::format(at, e.to_string()))?;
            Ok((dequantize(&q), Some(params)))
        }
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let (manifest, blobs) = parse_header(bytes)?;
    let base = (bytes.len() - blobs.len()) as u64;
    let specs: Vec<LayerSpec> = manifest.layers.iter().map(|l| l.spec).collect();
    let mut model = Model::new(&specs, manifest.seed, manifest.ema_momentum)
        .map_err(|e| Error::format(PREAMBLE_LEN, format!("invalid layer table: {e}")))?;
    for (i, entry) in manifest.layers.iter().enumerate() {
        let spec = entry.spec;
        model.layers[i].act_params = match &entry.act_quant {
            Some(q) => Some(q.to_params().map_err(|e| Error::format(PREAMBLE_LEN, format!("layer {i}: {e}")))?),
            None => None,
        };
        if !spec.has_weights() {
            continue;
        }
        let (w, b) = match (&entry.weight, &entry.bias) {
            (Some(w), Some(b)) => (w, b),
            _ => return Err(Error::format(PREAMBLE_LEN, format!("layer {i} is missing its weight or bias"))),
        };
        let (weight, params) = read_weight(blobs, base, w, &spec)?;
        let bias = read_fp32(blobs, base, b, &[spec.out_channels().expect("weight layer")])?;
        *model.weight_mut(i).expect("weight layer") = weight;
        *model.bias_mut(i).expect("weight layer") = bias;
        model.layers[i].weight_params = params;
        if let Some(s) = &entry.scale {
            model.layers[i].frozen_scale = Some(read_fp32(blobs, base, s, &[spec.out_channels().expect("weight layer")])?);
        }
    }
    Ok(model)
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
