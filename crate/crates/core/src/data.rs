//! Datasets: the CIFAR-10 binary format, 2D toy distributions and a tiny
//! synthetic shapes corpus, with pixel normalization and shuffled batching.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::Label;

pub const CIFAR_RECORD: usize = 3073;
pub const CIFAR_CLASSES: usize = 10;
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

pub const EIGHT_GAUSSIANS_RADIUS: f64 = 2.0;
pub const EIGHT_GAUSSIANS_STD: f64 = 0.1;
pub const TWO_MOONS_STD: f64 = 0.05;
pub const TINY_SHAPES_CLASSES: usize = 4;

/// `u8 → [−1, 1]`
pub fn normalize_u8(p: u8) -> f64 {
    p as f64 / 127.5 - 1.0
}

/// `[−1, 1] → [0, 1]`, clamped.
pub fn denormalize(x: &Tensor) -> Tensor {
    x.map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0))
}

/// `[−1, 1] → u8`, rounding to the nearest level.
pub fn to_u8(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

#[derive(Clone, Debug, PartialEq)]
enum Storage {
    Bytes(Vec<u8>),
    Floats(Vec<f64>),
}

/// A labelled collection of equally-shaped examples.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    sample_shape: Vec<usize>,
    storage: Storage,
    labels: Vec<usize>,
    num_classes: usize,
}

/// Images in `[−1, 1]` (or raw 2D points) with class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl LabeledBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Labels as conditioning inputs.
    pub fn conditioning(&self) -> Vec<Label> {
        self.labels.iter().map(|&y| Some(y)).collect()
    }
}

impl Dataset {
    pub fn from_tensor(data: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let n = *data.shape().first().unwrap_or(&0);
        if n != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{n} examples but {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} with {num_classes} classes"
            )));
        }
        let sample_shape = data.shape()[1..].to_vec();
        Ok(Self {
            sample_shape,
            storage: Storage::Floats(data.into_data()),
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn per(&self) -> usize {
        self.sample_shape.iter().product()
    }

    /// Gathers examples in the given order.
    pub fn batch(&self, indices: &[usize]) -> Result<LabeledBatch> {
        let per = self.per();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InvalidArgument(format!("example {i} of {}", self.len())));
            }
            match &self.storage {
                Storage::Bytes(b) => data.extend(b[i * per..(i + 1) * per].iter().map(|&p| normalize_u8(p))),
                Storage::Floats(f) => data.extend_from_slice(&f[i * per..(i + 1) * per]),
            }
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.sample_shape);
        Ok(LabeledBatch {
            images: Tensor::new(&shape, data)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        })
    }

    /// All examples, in storage order.
    pub fn all(&self) -> Result<LabeledBatch> {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }

    /// The first `n` examples.
    pub fn take(&self, n: usize) -> Result<Dataset> {
        let b = self.batch(&(0..n.min(self.len())).collect::<Vec<_>>())?;
        Dataset::from_tensor(b.images, b.labels, self.num_classes)
    }

    /// Indices of the examples of one class.
    pub fn class_indices(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }
}

// ---------------------------------------------------------------- CIFAR-10

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Parses concatenated 3073-byte records (label, then R, G, B planes).
pub fn parse_cifar10(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Format(format!(
            "{} bytes is not a whole number of {CIFAR_RECORD}-byte records",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for (i, rec) in bytes.chunks(CIFAR_RECORD).enumerate() {
        if rec[0] as usize >= CIFAR_CLASSES {
            return Err(Error::Format(format!("record {i} has label byte {}", rec[0])));
        }
        labels.push(rec[0] as usize);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok(Dataset {
        sample_shape: vec![3, 32, 32],
        storage: Storage::Bytes(pixels),
        labels,
        num_classes: CIFAR_CLASSES,
    })
}

/// Loads a split from the directory holding the standard binary batch
/// files, or from a single batch file.
pub fn load_cifar10_binary(path: &Path, split: Split) -> Result<Dataset> {
    if path.is_file() {
        return parse_cifar10(&fs::read(path)?);
    }
    let names: &[&str] = match split {
        Split::Train => &CIFAR_TRAIN_FILES,
        Split::Test => &[CIFAR_TEST_FILE],
    };
    let mut bytes = Vec::new();
    for name in names {
        let file = path.join(name);
        let chunk = fs::read(&file)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", file.display()))))?;
        if chunk.len() % CIFAR_RECORD != 0 {
            return Err(Error::Format(format!("{} is truncated", file.display())));
        }
        bytes.extend_from_slice(&chunk);
    }
    parse_cifar10(&bytes)
}

// ---------------------------------------------------------------- toy sets

/// Labels `0..k` in equal proportion (up to one), shuffled.
fn stratified_labels<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    labels.shuffle(rng);
    labels
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Toy2d {
    EightGaussians,
    TwoMoons,
}

impl std::str::FromStr for Toy2d {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eight_gaussians" => Ok(Toy2d::EightGaussians),
            "two_moons" => Ok(Toy2d::TwoMoons),
            other => Err(Error::Config(format!("unknown toy dataset `{other}`"))),
        }
    }
}

impl Toy2d {
    pub fn num_classes(self) -> usize {
        match self {
            Toy2d::EightGaussians => 8,
            Toy2d::TwoMoons => 2,
        }
    }
}

/// The eight mode centers on the radius-2 circle, at 45° spacing.
pub fn eight_gaussian_centers() -> Vec<(f64, f64)> {
    (0..8)
        .map(|k| {
            let a = k as f64 * PI / 4.0;
            (EIGHT_GAUSSIANS_RADIUS * a.cos(), EIGHT_GAUSSIANS_RADIUS * a.sin())
        })
        .collect()
}

/// `n` labelled 2D points, shape `[n, 2]`.
pub fn toy_2d<R: Rng + ?Sized>(kind: Toy2d, n: usize, rng: &mut R) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("empty toy dataset".into()));
    }
    let labels = stratified_labels(n, kind.num_classes(), rng);
    let mut data = Vec::with_capacity(2 * n);
    match kind {
        Toy2d::EightGaussians => {
            let centers = eight_gaussian_centers();
            let noise = Normal::new(0.0, EIGHT_GAUSSIANS_STD).expect("valid std");
            for &y in &labels {
                let (cx, cy) = centers[y];
                data.push(cx + noise.sample(rng));
                data.push(cy + noise.sample(rng));
            }
        }
        Toy2d::TwoMoons => {
            let noise = Normal::new(0.0, TWO_MOONS_STD).expect("valid std");
            for &y in &labels {
                let a = rng.random_range(0.0..PI);
                let (x, z) = if y == 0 {
                    (a.cos(), a.sin())
                } else {
                    (1.0 - a.cos(), 0.5 - a.sin())
                };
                data.push(x + noise.sample(rng));
                data.push(z + noise.sample(rng));
            }
        }
    }
    Dataset::from_tensor(Tensor::new(&[n, 2], data)?, labels, kind.num_classes())
}

/// Classes of [`tiny_shapes`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Square,
    Circle,
    HorizontalStripes,
    VerticalStripes,
}

impl Shape {
    pub const ALL: [Shape; 4] = [
        Shape::Square,
        Shape::Circle,
        Shape::HorizontalStripes,
        Shape::VerticalStripes,
    ];
}

const BACKGROUND: f64 = -1.0;

fn draw_shape<R: Rng + ?Sized>(shape: Shape, size: usize, rng: &mut R) -> Vec<f64> {
    let level = rng.random_range(0.2..1.0);
    let mut img = vec![BACKGROUND; size * size];
    match shape {
        Shape::Square => {
            let side = rng.random_range(size / 3 + 1..=size / 2 + 1);
            let (top, left) = (rng.random_range(0..=size - side), rng.random_range(0..=size - side));
            for r in top..top + side {
                for c in left..left + side {
                    img[r * size + c] = level;
                }
            }
        }
        Shape::Circle => {
            let radius = rng.random_range(size as f64 / 4.0..=size as f64 / 3.0);
            let lo = radius - 0.5;
            let hi = size as f64 - radius - 0.5;
            let (cy, cx) = (rng.random_range(lo..=hi), rng.random_range(lo..=hi));
            for r in 0..size {
                for c in 0..size {
                    if (r as f64 - cy).hypot(c as f64 - cx) <= radius {
                        img[r * size + c] = level;
                    }
                }
            }
        }
        Shape::HorizontalStripes | Shape::VerticalStripes => {
            let phase = rng.random_range(0..2);
            for r in 0..size {
                for c in 0..size {
                    let along = if shape == Shape::HorizontalStripes { r } else { c };
                    if (along + phase) % 2 == 0 {
                        img[r * size + c] = level;
                    }
                }
            }
        }
    }
    img
}

/// Grayscale `[n, 1, size, size]` images of four shape classes with random
/// placement and intensity, background at −1.
pub fn tiny_shapes<R: Rng + ?Sized>(n: usize, size: usize, rng: &mut R) -> Result<Dataset> {
    if size < 8 {
        return Err(Error::InvalidArgument(format!("tiny_shapes size {size} below 8")));
    }
    let labels = stratified_labels(n, TINY_SHAPES_CLASSES, rng);
    let mut data = Vec::with_capacity(n * size * size);
    for &y in &labels {
        data.extend(draw_shape(Shape::ALL[y], size, rng));
    }
    Dataset::from_tensor(Tensor::new(&[n, 1, size, size], data)?, labels, TINY_SHAPES_CLASSES)
}

// ---------------------------------------------------------------- batching

/// One shuffled pass over a dataset.
pub struct Batches<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for Batches<'_> {
    type Item = Result<LabeledBatch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let out = self.dataset.batch(&self.order[self.pos..end]);
        self.pos = end;
        Some(out)
    }
}

impl Batches<'_> {
    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

/// Shuffles once from `rng`, then yields batches of `batch_size`; the last
/// batch may be short.
pub fn batches<'a, R: Rng + ?Sized>(dataset: &'a Dataset, batch_size: usize, rng: &mut R) -> Result<Batches<'a>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size 0".into()));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(rng);
    Ok(Batches {
        dataset,
        order,
        batch_size,
        pos: 0,
    })
}

#[cfg(test)]
mod tests;
