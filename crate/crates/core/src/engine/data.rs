use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Calib,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticKind {
    /// Two isotropic Gaussians centred at ±(2σ, 2σ).
    Blobs,
    /// Four clusters at (±2, ±2); the label is the XOR of the coordinate signs.
    Xor,
}

impl std::str::FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(SyntheticKind::Blobs),
            "xor" => Ok(SyntheticKind::Xor),
            other => Err(Error::arg(format!("unknown synthetic dataset `{other}` (expected blobs or xor)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    split: Split,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        let n = features.shape().first().copied().unwrap_or(0);
        if n == 0 || labels.is_empty() {
            return Err(Error::arg("dataset must contain at least one sample"));
        }
        if n != labels.len() {
            return Err(Error::dim(format!("{n} feature rows but {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::arg(format!("label {bad} outside {num_classes} classes")));
        }
        Ok(Dataset {
            features,
            labels,
            num_classes,
            split,
        })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Features and labels of the given sample indices.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let x = self.features.gather_rows(indices)?;
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((x, y))
    }
}

/// Deterministic 2-D toy dataset; classes alternate by sample index.
pub fn gen_synthetic(kind: SyntheticKind, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::arg("synthetic dataset needs n >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    match kind {
        SyntheticKind::Blobs => {
            let noise = Normal::new(0.0f32, 1.0).expect("unit normal");
            for i in 0..n {
                let label = i % 2;
                let centre = if label == 0 { -2.0 } else { 2.0 };
                data.push(centre + noise.sample(&mut rng));
                data.push(centre + noise.sample(&mut rng));
                labels.push(label);
            }
        }
        SyntheticKind::Xor => {
            let noise = Normal::new(0.0f32, 0.5).expect("valid normal");
            for i in 0..n {
                let cluster = i % 4;
                let (sx, sy) = match cluster {
                    0 => (1.0, 1.0),
                    1 => (-1.0, 1.0),
                    2 => (-1.0, -1.0),
                    _ => (1.0, -1.0),
                };
                data.push(2.0 * sx + noise.sample(&mut rng));
                data.push(2.0 * sy + noise.sample(&mut rng));
                labels.push(cluster % 2);
            }
        }
    }
    Dataset::new(Tensor::new([n, 2], data)?, labels, 2, Split::Train)
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(offset as u64, "truncated IDX header"))
}

/// Parses IDX image bytes into `N×1×H×W` features scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES {
        return Err(Error::format(0, format!("IDX images magic {magic:#010x}, expected {IDX_IMAGES:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let h = be_u32(bytes, 8)? as usize;
    let w = be_u32(bytes, 12)? as usize;
    let body = &bytes[16..];
    let expected = n * h * w;
    if body.len() != expected {
        return Err(Error::format(
            16 + body.len().min(expected) as u64,
            format!("IDX images body has {} bytes, header declares {expected}", body.len()),
        ));
    }
    Tensor::new([n, 1, h, w], body.iter().map(|&p| p as f32 / 255.0).collect())
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS {
        return Err(Error::format(0, format!("IDX labels magic {magic:#010x}, expected {IDX_LABELS:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::format(
            8 + body.len().min(n) as u64,
            format!("IDX labels body has {} bytes, header declares {n}", body.len()),
        ));
    }
    Ok(body.iter().map(|&l| l as usize).collect())
}

/// Loads an IDX image/label pair; the class count is `max(label) + 1`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let labels = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let features = parse_idx_images(&images)?;
    let labels = parse_idx_labels(&labels)?;
    if features.shape()[0] != labels.len() {
        return Err(Error::dim(format!(
            "{} images but {} labels",
            features.shape()[0],
            labels.len()
        )));
    }
    let classes = labels.iter().max().map_or(0, |&m| m + 1).max(2);
    Dataset::new(features, labels, classes, Split::Train)
}

#[cfg(test)]
pub(crate) fn idx_images_bytes(n: usize, h: usize, w: usize, pixel: impl Fn(usize) -> u8) -> Vec<u8> {
    let mut out = Vec::new();
    for v in [IDX_IMAGES, n as u32, h as u32, w as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend((0..n * h * w).map(pixel));
    out
}
