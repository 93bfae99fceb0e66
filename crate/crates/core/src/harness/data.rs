//! Datasets: CIFAR-10 binary batches and seeded synthetic blobs.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const CIFAR_RECORD: usize = 3073;
pub const CIFAR_CLASSES: usize = 10;
const CIFAR_SIDE: usize = 32;

/// Images `[N, 3, H, W]` in `[0, 1]` with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor<f64>,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor<f64>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let n = match images.shape() {
            [n, 3, h, w] if *h > 0 && *w > 0 => *n,
            s => return Err(Error::shape(format!("images must be [N,3,H,W], got {s:?}"))),
        };
        if n == 0 || n != labels.len() {
            return Err(Error::shape(format!("{n} images for {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Format(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Self { images, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn images(&self) -> &Tensor<f64> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// `(H, W)`.
    pub fn image_size(&self) -> (usize, usize) {
        (self.images.dim(2), self.images.dim(3))
    }

    /// Gathers the given samples, cast to the training precision.
    pub fn batch<T: Real>(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let images = self.images.select_rows(indices).cast();
        (images, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// The first `n` samples.
    pub fn take(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.len() {
            return Err(Error::config(format!("cannot take {n} of {} samples", self.len())));
        }
        let idx: Vec<usize> = (0..n).collect();
        let (images, labels) = self.batch(&idx);
        Self::new(images, labels, self.classes)
    }
}

/// Parses concatenated 3073-byte records: a label byte followed by the
/// red, green and blue 32×32 planes, row-major.
pub fn parse_cifar10(bytes: &[u8]) -> Result<Dataset> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Format(format!(
            "CIFAR-10 data must be a non-empty multiple of {CIFAR_RECORD} bytes, got {}",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        if rec[0] as usize >= CIFAR_CLASSES {
            return Err(Error::Format(format!("CIFAR-10 label {} is not below 10", rec[0])));
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    let images = Tensor::new(&[n, 3, CIFAR_SIDE, CIFAR_SIDE], pixels)?;
    Dataset::new(images, labels, CIFAR_CLASSES)
}

/// Loads one batch file, or every `*.bin` file of a directory in name
/// order.
pub fn load_cifar10(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = if path.is_dir() {
        let mut files: Vec<_> = std::fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "bin"))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Format(format!("no .bin batch files in {}", path.display())));
        }
        let mut all = Vec::new();
        for f in files {
            all.extend(std::fs::read(f)?);
        }
        all
    } else {
        std::fs::read(path)?
    };
    parse_cifar10(&bytes)
}

const BLOB_STD: f64 = 0.15;

/// Per-channel mean of class `k`: a point on a circle around 0.5 in RGB
/// space, so every class gets a distinct color.
fn class_mean(k: usize, classes: usize, channel: usize) -> f64 {
    let theta = std::f64::consts::TAU * (k as f64 / classes as f64 + channel as f64 / 3.0);
    0.5 + 0.25 * theta.sin()
}

/// Class-conditional Gaussian blobs: sample `i` has label `i % classes`
/// and pixels drawn around its class color, clamped to `[0, 1]`.
pub fn synth_dataset(seed: u64, n: usize, classes: usize, size: usize) -> Result<Dataset> {
    if classes < 2 || n < classes || size == 0 {
        return Err(Error::config(format!("synthetic set needs n >= classes >= 2 and size > 0 (n={n}, classes={classes}, size={size})")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, BLOB_STD).expect("positive std");
    let plane = size * size;
    let mut pixels = Vec::with_capacity(n * 3 * plane);
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    for &k in &labels {
        for c in 0..3 {
            let mu = class_mean(k, classes, c);
            pixels.extend((0..plane).map(|_| (mu + noise.sample(&mut rng)).clamp(0.0, 1.0)));
        }
    }
    Dataset::new(Tensor::new(&[n, 3, size, size], pixels)?, labels, classes)
}
