//! In-memory datasets: a seeded Gaussian-blob generator and an IDX reader.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// One sample per row.
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub classes: usize,
    /// `(channels, height, width)` when the features are images.
    pub image_shape: Option<(usize, usize, usize)>,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::shape("Dataset::new", features.nrows(), labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::contract("Dataset::new", format!("label {bad} >= {classes} classes")));
        }
        Ok(Dataset {
            features,
            labels,
            classes,
            image_shape: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            image_shape: self.image_shape,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

/// Isotropic Gaussian clusters, one per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobsConfig {
    pub classes: usize,
    pub dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Standard deviation of the class centers around the origin.
    pub center_spread: f64,
    /// Standard deviation of samples around their center.
    pub noise: f64,
}

impl Default for BlobsConfig {
    fn default() -> Self {
        BlobsConfig {
            classes: 10,
            dim: 32,
            train_per_class: 200,
            test_per_class: 100,
            center_spread: 1.0,
            noise: 1.5,
        }
    }
}

impl BlobsConfig {
    /// Train and test splits drawn around the same centers.
    pub fn generate(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        if self.classes < 2 || self.dim == 0 {
            return Err(Error::Config("blobs need >= 2 classes and >= 1 dimension".into()));
        }
        let spread = Normal::new(0.0, self.center_spread)
            .map_err(|e| Error::Config(format!("center_spread: {e}")))?;
        let noise = Normal::new(0.0, self.noise).map_err(|e| Error::Config(format!("noise: {e}")))?;
        let mut rng = stream(seed, Purpose::Data);
        let centers = Array2::from_shape_simple_fn((self.classes, self.dim), || spread.sample(&mut rng));
        let draw = |per_class: usize, rng: &mut crate::rng::StreamRng| -> Result<Dataset> {
            let n = per_class * self.classes;
            let labels: Vec<usize> = (0..n).map(|i| i % self.classes).collect();
            let features = Array2::from_shape_fn((n, self.dim), |(i, j)| {
                centers[[labels[i], j]] + noise.sample(rng)
            });
            Dataset::new(features, labels, self.classes)
        };
        let train = draw(self.train_per_class, &mut rng)?;
        let test = draw(self.test_per_class, &mut rng)?;
        Ok((train, test))
    }
}

fn idx_error(path: &Path, reason: impl Into<String>) -> Error {
    Error::Dataset {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Reads an unsigned-byte IDX file, returning its dimensions and payload.
pub fn read_idx_u8(path: &Path) -> Result<(Vec<usize>, Vec<u8>)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(idx_error(path, "bad magic"));
    }
    if bytes[2] != 0x08 {
        return Err(idx_error(path, format!("unsupported element type 0x{:02x}", bytes[2])));
    }
    let ndims = usize::from(bytes[3]);
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(idx_error(path, "truncated header"));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let expected: usize = dims.iter().product();
    let payload = &bytes[header..];
    if payload.len() != expected {
        return Err(idx_error(
            path,
            format!("expected {expected} data bytes, found {}", payload.len()),
        ));
    }
    Ok((dims, payload.to_vec()))
}

pub fn write_idx_u8(path: &Path, dims: &[usize], data: &[u8]) -> Result<()> {
    let mut out = vec![0u8, 0, 0x08, dims.len() as u8];
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(data);
    fs::write(path, out)?;
    Ok(())
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let (dims, data) = read_idx_u8(path)?;
    if dims.len() != 1 {
        return Err(idx_error(path, format!("labels must be 1-d, got {} dims", dims.len())));
    }
    Ok(data.into_iter().map(usize::from).collect())
}

/// Loads an image/label IDX pair; pixels are scaled to `[0, 1]`.
pub fn load_idx(images: &Path, labels: &Path, classes: Option<usize>) -> Result<Dataset> {
    let (dims, pixels) = read_idx_u8(images)?;
    let (n, shape) = match dims.as_slice() {
        [n, h, w] => (*n, (1, *h, *w)),
        [n, c, h, w] => (*n, (*c, *h, *w)),
        _ => return Err(idx_error(images, "images must be 3-d or 4-d")),
    };
    let labels = read_idx_labels(labels)?;
    if labels.len() != n {
        return Err(idx_error(images, format!("{n} images but {} labels", labels.len())));
    }
    let classes = classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    let dim = shape.0 * shape.1 * shape.2;
    let features = Array2::from_shape_vec((n, dim), pixels.into_iter().map(|p| f64::from(p) / 255.0).collect())
        .expect("payload length checked");
    let mut data = Dataset::new(features, labels, classes)?;
    data.image_shape = Some(shape);
    Ok(data)
}

/// Random class-balanced labels, for tests that only need a label vector.
pub fn balanced_labels<R: Rng>(classes: usize, per_class: usize, rng: &mut R) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut labels: Vec<usize> = (0..classes * per_class).map(|i| i % classes).collect();
    labels.shuffle(rng);
    labels
}
