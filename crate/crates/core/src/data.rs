//! Image datasets: IDX files, dynamic binarization and a synthetic corpus.

use std::collections::HashMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use sha2::{Digest, Sha256};

use crate::error::{DvpError, Result};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Square 8-bit images `[n, c, D, D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pixels: Vec<u8>,
    n: usize,
    channels: usize,
    side: usize,
    pub labels: Option<Vec<u8>>,
    pub split: String,
    digest: String,
}

fn digest_of(pixels: &[u8], n: usize, channels: usize, side: usize) -> String {
    let mut h = Sha256::new();
    for v in [n, channels, side] {
        h.update((v as u64).to_le_bytes());
    }
    h.update(pixels);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

impl Dataset {
    pub fn new(pixels: Vec<u8>, n: usize, channels: usize, side: usize, split: impl Into<String>) -> Result<Self> {
        if pixels.len() != n * channels * side * side {
            return Err(DvpError::dim(
                "dataset",
                format!("{} bytes for {n} images of {channels}x{side}x{side}", pixels.len()),
            ));
        }
        let digest = digest_of(&pixels, n, channels, side);
        Ok(Self {
            pixels,
            n,
            channels,
            side,
            labels: None,
            split: split.into(),
            digest,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn side(&self) -> usize {
        self.side
    }

    /// Hex SHA-256 of the shape and pixel bytes.
    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    fn image_len(&self) -> usize {
        self.channels * self.side * self.side
    }

    pub fn image_bytes(&self, i: usize) -> &[u8] {
        let m = self.image_len();
        &self.pixels[i * m..(i + 1) * m]
    }

    /// Intensities scaled to `[0, 1]`, shape `[c, D, D]`.
    pub fn image<T: Real>(&self, i: usize) -> Tensor<T> {
        let data = self.image_bytes(i).iter().map(|&v| T::from_f64(v as f64 / 255.0)).collect();
        Tensor::new(vec![self.channels, self.side, self.side], data).expect("sized by construction")
    }

    /// Intensities in `[0, 1]` of the selected images, `[k, c, D, D]`.
    pub fn batch<T: Real>(&self, idx: &[usize]) -> Tensor<T> {
        let mut data = Vec::with_capacity(idx.len() * self.image_len());
        for &i in idx {
            data.extend(self.image_bytes(i).iter().map(|&v| T::from_f64(v as f64 / 255.0)));
        }
        Tensor::new(vec![idx.len(), self.channels, self.side, self.side], data).expect("sized by construction")
    }

    /// The selected images, each pixel drawn as Bernoulli(intensity / 255).
    pub fn binarized_batch<T: Real>(&self, idx: &[usize], rng: &mut Rng) -> Tensor<T> {
        let mut bytes = Vec::with_capacity(idx.len() * self.image_len());
        for &i in idx {
            bytes.extend_from_slice(self.image_bytes(i));
        }
        let shape = [idx.len(), self.channels, self.side, self.side];
        binarize_dynamic(&bytes, &shape, rng).expect("sized by construction")
    }

    /// Images `start..start + len` as a new dataset.
    pub fn subset(&self, start: usize, len: usize, split: impl Into<String>) -> Result<Self> {
        if start + len > self.n {
            return Err(DvpError::usage(format!("subset {start}..{} of {}", start + len, self.n)));
        }
        let m = self.image_len();
        let mut out = Self::new(
            self.pixels[start * m..(start + len) * m].to_vec(),
            len,
            self.channels,
            self.side,
            split,
        )?;
        out.labels = self.labels.as_ref().map(|l| l[start..start + len].to_vec());
        Ok(out)
    }

    /// Split off the last `n_val` images as a validation set.
    pub fn split_tail(&self, n_val: usize) -> Result<(Self, Self)> {
        if n_val >= self.n {
            return Err(DvpError::usage(format!(
                "validation size {n_val} leaves no training images out of {}",
                self.n
            )));
        }
        let train = self.subset(0, self.n - n_val, "train")?;
        let val = self.subset(self.n - n_val, n_val, "val")?;
        Ok((train, val))
    }
}

/// Each byte becomes 1 with probability `byte / 255`.
pub fn binarize_dynamic<T: Real>(bytes: &[u8], shape: &[usize], rng: &mut Rng) -> Result<Tensor<T>> {
    let data = bytes
        .iter()
        .map(|&v| {
            if rng.uniform() < v as f64 / 255.0 {
                T::one()
            } else {
                T::zero()
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| DvpError::Format {
            offset,
            detail: "truncated header".into(),
        })
}

/// Parse an IDX image file (`[n, rows, cols]` unsigned bytes).
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DvpError::Format {
            offset: 0,
            detail: format!("image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    if rows != cols {
        return Err(DvpError::Format {
            offset: 8,
            detail: format!("non-square images {rows}x{cols}"),
        });
    }
    let need = 16 + n * rows * cols;
    if bytes.len() < need {
        return Err(DvpError::Format {
            offset: bytes.len(),
            detail: format!("truncated pixel data, need {need} bytes"),
        });
    }
    if bytes.len() > need {
        return Err(DvpError::Format {
            offset: need,
            detail: "trailing bytes".into(),
        });
    }
    Ok((n, rows, bytes[16..].to_vec()))
}

/// Parse an IDX label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DvpError::Format {
            offset: 0,
            detail: format!("label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let n = be_u32(bytes, 4)? as usize;
    if bytes.len() != 8 + n {
        return Err(DvpError::Format {
            offset: bytes.len().min(8 + n),
            detail: format!("expected {n} labels"),
        });
    }
    Ok(bytes[8..].to_vec())
}

/// Load single-channel images and optional labels; `.gz` files are
/// detected by content.
pub fn load_idx(images: &Path, labels: Option<&Path>) -> Result<Dataset> {
    let (n, side, pixels) = parse_idx_images(&read_maybe_gz(images)?)?;
    let split = images
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut ds = Dataset::new(pixels, n, 1, side, split)?;
    if let Some(path) = labels {
        let l = parse_idx_labels(&read_maybe_gz(path)?)?;
        if l.len() != n {
            return Err(DvpError::Format {
                offset: 4,
                detail: format!("{} labels for {n} images", l.len()),
            });
        }
        ds.labels = Some(l);
    }
    Ok(ds)
}

pub fn encode_idx_images(ds: &Dataset) -> Result<Vec<u8>> {
    if ds.channels != 1 {
        return Err(DvpError::usage("IDX images are single-channel"));
    }
    let mut out = Vec::with_capacity(16 + ds.pixels.len());
    for v in [IDX_IMAGES_MAGIC, ds.n as u32, ds.side as u32, ds.side as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&ds.pixels);
    Ok(out)
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

fn find(dir: &Path, stem: &str) -> Option<PathBuf> {
    [stem.to_string(), format!("{stem}.gz")]
        .into_iter()
        .map(|f| dir.join(f))
        .find(|p| p.exists())
}

/// Train and test splits from a directory with the standard MNIST file
/// names (optionally gzipped).
pub fn load_mnist_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let load = |prefix: &str, split: &str| -> Result<Dataset> {
        let images = find(dir, &format!("{prefix}-images-idx3-ubyte")).ok_or_else(|| {
            DvpError::usage(format!("{prefix}-images-idx3-ubyte not found in {}", dir.display()))
        })?;
        let labels = find(dir, &format!("{prefix}-labels-idx1-ubyte"));
        let mut ds = load_idx(&images, labels.as_deref())?;
        ds.split = split.into();
        Ok(ds)
    };
    Ok((load("train", "train")?, load("t10k", "test")?))
}

/// One configuration of the synthetic generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum Shape {
    Rect { x: usize, y: usize, w: usize, h: usize },
    Cross { cx: usize, cy: usize, arm: usize },
}

fn rect_sizes(side: usize) -> Vec<usize> {
    (2..=side / 2).collect()
}

fn cross_arms(side: usize) -> Vec<usize> {
    (1..=(side / 4).max(1)).collect()
}

fn render(shape: Shape, side: usize) -> Vec<u8> {
    let mut img = vec![0u8; side * side];
    match shape {
        Shape::Rect { x, y, w, h } => {
            for r in y..y + h {
                for c in x..x + w {
                    img[r * side + c] = 255;
                }
            }
        }
        Shape::Cross { cx, cy, arm } => {
            for d in 0..=2 * arm {
                img[cy * side + cx + d - arm] = 255;
                img[(cy + d - arm) * side + cx] = 255;
            }
        }
    }
    img
}

fn draw_shape(side: usize, rng: &mut Rng) -> Shape {
    if rng.below(2) == 0 {
        let sizes = rect_sizes(side);
        let w = sizes[rng.below(sizes.len())];
        let h = sizes[rng.below(sizes.len())];
        let x = rng.below(side - w + 1);
        let y = rng.below(side - h + 1);
        Shape::Rect { x, y, w, h }
    } else {
        let arms = cross_arms(side);
        let arm = arms[rng.below(arms.len())];
        let span = side - 2 * arm;
        Shape::Cross {
            cx: arm + rng.below(span),
            cy: arm + rng.below(span),
            arm,
        }
    }
}

/// Deterministic binary images of one rectangle or one cross each.
pub fn synthetic_shapes(n: usize, side: usize, seed: u64) -> Result<Dataset> {
    if side < 4 {
        return Err(DvpError::usage(format!("synthetic images need side >= 4, got {side}")));
    }
    let mut rng = Rng::new(seed);
    let mut pixels = Vec::with_capacity(n * side * side);
    for _ in 0..n {
        pixels.extend(render(draw_shape(side, &mut rng), side));
    }
    Dataset::new(pixels, n, 1, side, "synthetic")
}

/// Probability of every distinct image the generator can emit.
fn synthetic_support(side: usize) -> HashMap<Vec<u8>, f64> {
    let mut mass: HashMap<Vec<u8>, f64> = HashMap::new();
    let sizes = rect_sizes(side);
    let ps = 0.5 / (sizes.len() * sizes.len()) as f64;
    for &w in &sizes {
        for &h in &sizes {
            let positions = (side - w + 1) * (side - h + 1);
            for x in 0..=side - w {
                for y in 0..=side - h {
                    *mass.entry(render(Shape::Rect { x, y, w, h }, side)).or_default() +=
                        ps / positions as f64;
                }
            }
        }
    }
    let arms = cross_arms(side);
    for &arm in &arms {
        let span = side - 2 * arm;
        let p = 0.5 / arms.len() as f64 / (span * span) as f64;
        for cx in arm..arm + span {
            for cy in arm..arm + span {
                *mass.entry(render(Shape::Cross { cx, cy, arm }, side)).or_default() += p;
            }
        }
    }
    mass
}

/// Entropy in nats of one synthetic image, by enumerating the generator's
/// support and merging configurations that render identically.
pub fn synthetic_entropy(side: usize) -> f64 {
    -synthetic_support(side)
        .values().map(|&p| p * p.ln()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_mass_sums_to_one() {
        let total: f64 = synthetic_support(8).values().sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(synthetic_entropy(8) > 0.0);
    }

    #[test]
    fn split_tail_sizes() {
        let ds = synthetic_shapes(10, 8, 0).unwrap();
        let (a, b) = ds.split_tail(3).unwrap();
        assert_eq!((a.len(), b.len()), (7, 3));
        assert!(ds.split_tail(10).is_err());
    }
}
