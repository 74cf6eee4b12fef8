//! Datasets: MNIST IDX and CIFAR-10 binary readers and writers,
//! per-channel normalization, augmentation and small synthetic tasks.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Per-channel statistics of the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[N, C, H, W]`, in `[0, 1]` unless normalized.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    /// Set once the images have been normalized with these statistics.
    pub norm: Option<NormStats>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::shape("Dataset::new", "[N, C, H, W]", images.shape()));
        }
        if images.batch() != labels.len() {
            return Err(Error::shape("Dataset::new", images.batch(), labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(
                "Dataset::new",
                format!("label {bad} out of range for {classes} classes"),
            ));
        }
        Ok(Self {
            images,
            labels,
            classes,
            norm: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]`
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        (
            self.images.select_batch(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let (images, labels) = self.batch(indices);
        Dataset {
            images,
            labels,
            classes: self.classes,
            norm: self.norm.clone(),
        }
    }

    /// First `n` examples.
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        self.subset(&(0..n).collect::<Vec<_>>())
    }

    /// Per-channel mean and standard deviation.
    pub fn stats(&self) -> NormStats {
        let [c, h, w] = self.image_shape();
        let plane = h * w;
        let mut mean = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for b in 0..self.len() {
            let s = self.images.sample(b);
            for ch in 0..c {
                for &v in &s[ch * plane..(ch + 1) * plane] {
                    mean[ch] += v;
                    sq[ch] += v * v;
                }
            }
        }
        let count = (self.len() * plane).max(1) as f64;
        let std = mean
            .iter_mut()
            .zip(&sq)
            .map(|(m, s)| {
                *m /= count;
                (s / count - *m * *m).max(0.0).sqrt().max(1e-12)
            })
            .collect();
        NormStats { mean, std }
    }

    /// Returns a copy normalized per channel with `stats`.
    pub fn normalized(&self, stats: &NormStats) -> Result<Dataset> {
        let [c, h, w] = self.image_shape();
        if stats.mean.len() != c || stats.std.len() != c {
            return Err(Error::shape("normalized", c, stats.mean.len()));
        }
        let mut images = self.images.clone();
        let plane = h * w;
        for b in 0..self.len() {
            let s = images.sample_mut(b);
            for ch in 0..c {
                for v in &mut s[ch * plane..(ch + 1) * plane] {
                    *v = (*v - stats.mean[ch]) / stats.std[ch];
                }
            }
        }
        Ok(Dataset {
            images,
            labels: self.labels.clone(),
            classes: self.classes,
            norm: Some(stats.clone()),
        })
    }
}

fn format_err(format: &'static str, reason: impl Into<String>) -> Error {
    Error::Format {
        format,
        reason: reason.into(),
    }
}

fn be_u32(bytes: &[u8], at: usize, format: &'static str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| format_err(format, format!("truncated header at byte {at}")))
}

/// Parses an IDX image file into `[N, 1, H, W]` with values in `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    let magic = be_u32(bytes, 0, "idx")?;
    if magic != IDX_IMAGES {
        return Err(format_err("idx", format!("bad image magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4, "idx")? as usize;
    let h = be_u32(bytes, 8, "idx")? as usize;
    let w = be_u32(bytes, 12, "idx")? as usize;
    let body = &bytes[16..];
    let want = n * h * w;
    if body.len() != want {
        return Err(format_err(
            "idx",
            format!("expected {want} pixel bytes, found {}", body.len()),
        ));
    }
    Ok(Tensor::from_fn(&[n, 1, h, w], |i| body[i] as f64 / 255.0))
}

/// Parses an IDX label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, "idx")?;
    if magic != IDX_LABELS {
        return Err(format_err("idx", format!("bad label magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4, "idx")? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(format_err(
            "idx",
            format!("expected {n} label bytes, found {}", body.len()),
        ));
    }
    Ok(body.iter().map(|&b| b as usize).collect())
}

fn to_byte(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Serializes `[N, 1, H, W]` images in `[0, 1]` as an IDX image file.
pub fn encode_idx_images(images: &Tensor) -> Result<Vec<u8>> {
    let [n, 1, h, w] = *images.shape() else {
        return Err(Error::shape(
            "encode_idx_images",
            "[N, 1, H, W]",
            images.shape(),
        ));
    };
    let mut out = Vec::with_capacity(16 + images.len());
    for v in [IDX_IMAGES, n as u32, h as u32, w as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(images.data().iter().map(|&v| to_byte(v)));
    Ok(out)
}

pub fn encode_idx_labels(labels: &[usize]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &l in labels {
        out.push(
            u8::try_from(l).map_err(|_| {
                Error::invalid("encode_idx_labels", format!("label {l} exceeds 255"))
            })?,
        );
    }
    Ok(out)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Loads an MNIST-style image/label file pair (10 classes).
pub fn load_mnist_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let x = parse_idx_images(&read(images)?)?;
    let y = parse_idx_labels(&read(labels)?)?;
    if x.batch() != y.len() {
        return Err(format_err(
            "idx",
            format!("{} images but {} labels", x.batch(), y.len()),
        ));
    }
    if let Some(&bad) = y.iter().find(|&&l| l >= 10) {
        return Err(format_err("idx", format!("label {bad} out of range")));
    }
    Dataset::new(x, y, 10)
}

/// Parses CIFAR-10 binary records (1 label byte, 3072 pixel bytes).
pub fn parse_cifar10(bytes: &[u8]) -> Result<Dataset> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(format_err(
            "cifar10",
            format!(
                "length {} is not a positive multiple of {CIFAR_RECORD}",
                bytes.len()
            ),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for (i, rec) in bytes.chunks(CIFAR_RECORD).enumerate() {
        if rec[0] >= 10 {
            return Err(format_err(
                "cifar10",
                format!("record {i} has label {}", rec[0]),
            ));
        }
        labels.push(rec[0] as usize);
        data.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Dataset::new(Tensor::from_parts(vec![n, 3, 32, 32], data), labels, 10)
}

pub fn load_cifar10_bin(path: &Path) -> Result<Dataset> {
    parse_cifar10(&read(path)?)
}

/// Serializes a `[N, 3, 32, 32]` dataset with values in `[0, 1]`.
pub fn encode_cifar10(data: &Dataset) -> Result<Vec<u8>> {
    if data.images.shape()[1..] != [3, 32, 32] {
        return Err(Error::shape(
            "encode_cifar10",
            "[N, 3, 32, 32]",
            data.images.shape(),
        ));
    }
    let mut out = Vec::with_capacity(data.len() * CIFAR_RECORD);
    for (b, &l) in data.labels.iter().enumerate() {
        out.push(
            u8::try_from(l).map_err(|_| Error::invalid("encode_cifar10", "label exceeds 255"))?,
        );
        out.extend(data.images.sample(b).iter().map(|&v| to_byte(v)));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentOptions {
    /// Mirror each example horizontally with probability 1/2.
    #[serde(default)]
    pub hflip: bool,
    /// Random crop from a zero-padded canvas with this border (0: off).
    #[serde(default)]
    pub crop_padding: usize,
}

impl AugmentOptions {
    pub fn enabled(&self) -> bool {
        self.hflip || self.crop_padding > 0
    }
}

/// Mirrors one `[C, H, W]` sample left to right.
pub fn hflip(sample: &mut [f64], c: usize, h: usize, w: usize) {
    for row in sample[..c * h * w].chunks_mut(w) {
        row.reverse();
    }
}

/// Crops an `H x W` window at offset `(dy, dx)` from the sample padded by
/// `pad` zeros on every side.
pub fn crop(
    sample: &[f64],
    c: usize,
    h: usize,
    w: usize,
    pad: usize,
    dy: usize,
    dx: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for i in 0..h {
            let si = i + dy;
            if si < pad || si - pad >= h {
                continue;
            }
            for j in 0..w {
                let sj = j + dx;
                if sj < pad || sj - pad >= w {
                    continue;
                }
                out[(ch * h + i) * w + j] = sample[(ch * h + si - pad) * w + sj - pad];
            }
        }
    }
    out
}

/// Independent per-example flips and crops of a `[B, C, H, W]` batch.
pub fn augment(batch: &Tensor, rng: &mut impl Rng, opts: &AugmentOptions) -> Result<Tensor> {
    let [_, c, h, w] = *batch.shape() else {
        return Err(Error::shape("augment", "[B, C, H, W]", batch.shape()));
    };
    let mut out = batch.clone();
    if !opts.enabled() {
        return Ok(out);
    }
    for b in 0..out.batch() {
        let s = out.sample_mut(b);
        if opts.hflip && rng.gen_bool(0.5) {
            hflip(s, c, h, w);
        }
        if opts.crop_padding > 0 {
            let p = opts.crop_padding;
            let dy = rng.gen_range(0..=2 * p);
            let dx = rng.gen_range(0..=2 * p);
            let cropped = crop(s, c, h, w, p, dy, dx);
            s.copy_from_slice(&cropped);
        }
    }
    Ok(out)
}

/// Noisy class prototypes: each class owns a random image in `[0, 1]`;
/// examples add uniform noise of half-width `noise` and clip to `[0, 1]`.
pub fn synthetic(n: usize, shape: [usize; 3], classes: usize, noise: f64, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d: usize = shape.iter().product();
    let protos: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..d).map(|_| rng.gen::<f64>()).collect())
        .collect();
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let l = i % classes;
        labels.push(l);
        data.extend(
            protos[l]
                .iter()
                .map(|&p| (p + rng.gen_range(-noise..=noise)).clamp(0.0, 1.0)),
        );
    }
    let [c, h, w] = shape;
    Dataset {
        images: Tensor::from_parts(vec![n, c, h, w], data),
        labels,
        classes,
        norm: None,
    }
}
