//! Datasets: IDX ingestion and a seeded Gaussian-blob generator.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Distance of each blob mean from the origin along its own axis.
pub const SIMPLEX_SCALE: f64 = 3.0;

/// Row-major features with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
    pub dim: usize,
    pub classes: usize,
}

impl Dataset {
    pub fn new(inputs: Vec<f64>, labels: Vec<usize>, dim: usize, classes: usize) -> Result<Self> {
        if dim == 0 || inputs.len() != labels.len() * dim {
            return Err(Error::shape(format!(
                "{} input values do not form {} rows of width {dim}",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(y) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::usage(format!("label {y} is outside [0, {classes})")));
        }
        Ok(Self {
            inputs,
            labels,
            dim,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    /// Copies the rows at `indices` into contiguous buffers.
    pub fn gather(&self, indices: &[usize]) -> (Vec<f64>, Vec<usize>) {
        let mut x = Vec::with_capacity(indices.len() * self.dim);
        let mut y = Vec::with_capacity(indices.len());
        for &i in indices {
            x.extend_from_slice(self.row(i));
            y.push(self.labels[i]);
        }
        (x, y)
    }

    pub fn label_histogram(&self, indices: &[usize]) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &i in indices {
            h[self.labels[i]] += 1;
        }
        h
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
}

/// Decodes an IDX image file: returns (count, rows·cols, pixels in [0,1]).
pub fn decode_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let err = |message: String| Error::Idx {
        path: path.to_path_buf(),
        message,
    };
    let magic = be_u32(bytes, 0).ok_or_else(|| err("truncated header".into()))?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(err(format!(
            "bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let (count, rows, cols) = match (be_u32(bytes, 4), be_u32(bytes, 8), be_u32(bytes, 12)) {
        (Some(n), Some(r), Some(c)) => (n as usize, r as usize, c as usize),
        _ => return Err(err("truncated header".into())),
    };
    let pixels = rows * cols;
    let expected = 16 + count * pixels;
    if bytes.len() != expected {
        return Err(err(format!(
            "expected {expected} bytes, found {}",
            bytes.len()
        )));
    }
    let data = bytes[16..].iter().map(|&b| b as f64 / 255.0).collect();
    Ok((count, pixels, data))
}

pub fn decode_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    let err = |message: String| Error::Idx {
        path: path.to_path_buf(),
        message,
    };
    let magic = be_u32(bytes, 0).ok_or_else(|| err("truncated header".into()))?;
    if magic != IDX_LABELS_MAGIC {
        return Err(err(format!(
            "bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let count = be_u32(bytes, 4).ok_or_else(|| err("truncated header".into()))? as usize;
    if bytes.len() != 8 + count {
        return Err(err(format!(
            "expected {} bytes, found {}",
            8 + count,
            bytes.len()
        )));
    }
    Ok(bytes[8..].iter().map(|&b| b as usize).collect())
}

/// Loads an IDX image/label pair; pixels are scaled by 1/255.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let (count, dim, inputs) = decode_idx_images(&read_file(images)?, images)?;
    let ys = decode_idx_labels(&read_file(labels)?, labels)?;
    if ys.len() != count {
        return Err(Error::Idx {
            path: labels.to_path_buf(),
            message: format!("{} labels for {count} images", ys.len()),
        });
    }
    if dim == 0 {
        return Err(Error::Idx {
            path: images.to_path_buf(),
            message: "images have zero pixels".into(),
        });
    }
    let classes = ys.iter().copied().max().map_or(1, |m| m + 1);
    Dataset::new(inputs, ys, dim, classes)
}

/// Isotropic Gaussian blobs with standard deviation `spread` around class
/// means `SIMPLEX_SCALE · e_c`; rows are shuffled deterministically.
pub fn generate_synthetic(
    classes: usize,
    dims: usize,
    samples_per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::usage("synthetic data needs at least two classes"));
    }
    if dims < classes {
        return Err(Error::usage(format!(
            "synthetic data needs dims >= classes ({dims} < {classes})"
        )));
    }
    if spread.is_nan() || spread < 0.0 {
        return Err(Error::usage("cluster spread must be non-negative"));
    }
    let mut rng = stream_rng(seed, Stream::Synthetic, &[]);
    let mut order: Vec<usize> = (0..classes * samples_per_class)
        .map(|i| i / samples_per_class)
        .collect();
    order.shuffle(&mut rng);
    let mut inputs = Vec::with_capacity(order.len() * dims);
    for &c in &order {
        for d in 0..dims {
            let center = if d == c { SIMPLEX_SCALE } else { 0.0 };
            let noise: f64 = rng.sample(StandardNormal);
            inputs.push(center + spread * noise);
        }
    }
    Dataset::new(inputs, order, dims, classes)
}
