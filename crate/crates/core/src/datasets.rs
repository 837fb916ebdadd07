//! MNIST IDX and CIFAR-10 binary loaders, synthetic blobs and seeded batching.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    /// `[N, ...]` with values in `[0, 1]`.
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl LabeledDataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>) -> Result<Self> {
        let n = inputs.shape().first().copied().unwrap_or(0);
        if n != labels.len() {
            return Err(Error::Consistency(format!(
                "{n} inputs but {} labels",
                labels.len()
            )));
        }
        if let Some(v) = inputs.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("input value {v} outside [0, 1]")));
        }
        Ok(LabeledDataset { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-example shape.
    pub fn example_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    pub fn select(&self, idx: &[usize]) -> LabeledDataset {
        LabeledDataset {
            inputs: self.inputs.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// The first `n` examples (or all of them).
    pub fn take(&self, n: usize) -> LabeledDataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Format(format!("{what}: truncated header")))
}

/// Parses IDX image and label files (magic `0x803` / `0x801`).
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<LabeledDataset> {
    let magic = be_u32(images, 0, "IDX images")?;
    if magic != 0x0000_0803 {
        return Err(Error::Format(format!("IDX images: bad magic 0x{magic:08x}")));
    }
    let n = be_u32(images, 4, "IDX images")? as usize;
    let rows = be_u32(images, 8, "IDX images")? as usize;
    let cols = be_u32(images, 12, "IDX images")? as usize;
    let body = &images[16..];
    if body.len() != n * rows * cols {
        return Err(Error::Format(format!(
            "IDX images: header promises {n}x{rows}x{cols} pixels, file holds {}",
            body.len()
        )));
    }
    let magic = be_u32(labels, 0, "IDX labels")?;
    if magic != 0x0000_0801 {
        return Err(Error::Format(format!("IDX labels: bad magic 0x{magic:08x}")));
    }
    let nl = be_u32(labels, 4, "IDX labels")? as usize;
    let lbody = &labels[8..];
    if lbody.len() != nl {
        return Err(Error::Format(format!(
            "IDX labels: header promises {nl} labels, file holds {}",
            lbody.len()
        )));
    }
    if nl != n {
        return Err(Error::Consistency(format!("{n} images but {nl} labels")));
    }
    let inputs = Tensor::new(
        vec![n, rows, cols, 1],
        body.iter().map(|&b| f64::from(b) / 255.0).collect(),
    )?;
    LabeledDataset::new(inputs, lbody.iter().map(|&b| usize::from(b)).collect())
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let images = std::fs::read(images_path)?;
    let labels = std::fs::read(labels_path)?;
    parse_idx(&images, &labels)
}

const CIFAR_RECORD: usize = 3073;

/// Parses concatenated CIFAR-10 binary records into `[N, 32, 32, 3]`.
pub fn parse_cifar10(bytes: &[u8]) -> Result<LabeledDataset> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Format(format!(
            "CIFAR-10: {} bytes is not a whole number of {CIFAR_RECORD}-byte records",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut data = vec![0.0; n * 3072];
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(Error::Format(format!("CIFAR-10 record {i}: label {}", rec[0])));
        }
        labels.push(usize::from(rec[0]));
        let dst = &mut data[i * 3072..(i + 1) * 3072];
        for c in 0..3 {
            for p in 0..1024 {
                dst[p * 3 + c] = f64::from(rec[1 + c * 1024 + p]) / 255.0;
            }
        }
    }
    LabeledDataset::new(Tensor::new(vec![n, 32, 32, 3], data)?, labels)
}

pub fn load_cifar10(batch_paths: &[&Path]) -> Result<LabeledDataset> {
    let mut bytes = Vec::new();
    for p in batch_paths {
        let b = std::fs::read(p)?;
        if b.len() % CIFAR_RECORD != 0 {
            return Err(Error::Format(format!(
                "CIFAR-10 file {}: length {} is not a multiple of {CIFAR_RECORD}",
                p.display(),
                b.len()
            )));
        }
        bytes.extend(b);
    }
    parse_cifar10(&bytes)
}

/// Random horizontal flip and shift of up to `max_shift` pixels (zero fill)
/// for every `[N, H, L, C]` image.
pub fn augment_images<R: Rng + ?Sized>(inputs: &Tensor, max_shift: usize, rng: &mut R) -> Result<Tensor> {
    let &[n, h, l, c] = inputs.shape() else {
        return Err(Error::dim(format!("augmentation needs [N, H, L, C], got {:?}", inputs.shape())));
    };
    let mut out = vec![0.0; inputs.len()];
    let s = max_shift as i64;
    for i in 0..n {
        let flip = rng.gen_bool(0.5);
        let dy = rng.gen_range(-s..=s);
        let dx = rng.gen_range(-s..=s);
        let src = &inputs.data()[i * h * l * c..(i + 1) * h * l * c];
        let dst = &mut out[i * h * l * c..(i + 1) * h * l * c];
        for y in 0..h as i64 {
            for x in 0..l as i64 {
                let sy = y - dy;
                let sx0 = x - dx;
                if sy < 0 || sy >= h as i64 || sx0 < 0 || sx0 >= l as i64 {
                    continue;
                }
                let sx = if flip { l as i64 - 1 - sx0 } else { sx0 };
                let from = ((sy as usize * l) + sx as usize) * c;
                let to = ((y as usize * l) + x as usize) * c;
                dst[to..to + c].copy_from_slice(&src[from..from + c]);
            }
        }
    }
    Tensor::new(inputs.shape().to_vec(), out)
}

fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // Box-Muller
    let u1 = rng::uniform(rng);
    let u2 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Unit-variance Gaussian clusters centred at `separation * e_{k mod dim}`
/// (negated for the second lap around the axes), min-max scaled to `[0, 1]`.
pub fn synthetic_blobs(
    n_per_class: usize,
    n_classes: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if n_per_class == 0 || n_classes == 0 || dim == 0 {
        return Err(Error::Config("blobs need positive counts and dimension".into()));
    }
    if n_classes > 2 * dim {
        return Err(Error::Config(format!(
            "{n_classes} blob classes need dim >= {}",
            n_classes.div_ceil(2)
        )));
    }
    let mut rng = rng::stream(seed, 0);
    let n = n_per_class * n_classes;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for k in 0..n_classes {
        let axis = k % dim;
        let sign = if k < dim { 1.0 } else { -1.0 };
        for _ in 0..n_per_class {
            for d in 0..dim {
                let centre = if d == axis { sign * separation } else { 0.0 };
                data.push(centre + standard_normal(&mut rng));
            }
            labels.push(k);
        }
    }
    for d in 0..dim {
        let col = data.iter().skip(d).step_by(dim);
        let (lo, hi) = col.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        for v in data.iter_mut().skip(d).step_by(dim) {
            *v = (*v - lo) / span;
        }
    }
    LabeledDataset::new(Tensor::new(vec![n, dim], data)?, labels)
}

/// Seeded permutation of `0..n` split into batches; the last may be partial.
pub fn batches(n: usize, batch_size: usize, shuffle_seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(shuffle_seed, 0));
    Ok(idx.chunks(batch_size).map(<[usize]>::to_vec).collect())
}
