//! IDX (MNIST, Fashion-MNIST) and Cifar-10 binary batch readers.

use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;

use crate::error::{Error, Result};
use crate::nn::{Shape, NUM_CLASSES};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

const CIFAR_SIDE: usize = 32;
const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;

/// Images with pixel values scaled to [0, 1] and their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub shape: Shape,
    pub pixels: Vec<f64>,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn new(shape: Shape, pixels: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if pixels.len() != shape.len() * labels.len() {
            return Err(Error::ShapeMismatch { expected: shape.len() * labels.len(), got: pixels.len() });
        }
        if let Some(&l) = labels.iter().find(|&&l| usize::from(l) >= NUM_CLASSES) {
            return Err(Error::InvalidArgument(format!("label {l} outside 0..{NUM_CLASSES}")));
        }
        Ok(Dataset { shape, pixels, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.shape.len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> usize {
        usize::from(self.labels[i])
    }

    /// The first `n` samples (all of them when `n` exceeds the size).
    pub fn truncated(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            shape: self.shape,
            pixels: self.pixels[..n * self.shape.len()].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut c = [0; NUM_CLASSES];
        for &l in &self.labels {
            c[usize::from(l)] += 1;
        }
        c
    }
}

/// Reads a whole file, transparently inflating gzip content.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path).and_then(|mut f| f.read_to_end(&mut raw)).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out).map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated { path: path.to_path_buf(), expected: at + 4, found: bytes.len() })
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let found = be_u32(bytes, 0, path)?;
    if found != expected {
        return Err(Error::BadMagic { path: path.to_path_buf(), expected, found });
    }
    Ok(())
}

fn body<'a>(bytes: &'a [u8], header: usize, len: usize, path: &Path) -> Result<&'a [u8]> {
    let need = header.saturating_add(len);
    if bytes.len() < need {
        return Err(Error::Truncated { path: path.to_path_buf(), expected: need, found: bytes.len() });
    }
    Ok(&bytes[header..need])
}

/// Parses an IDX3 image file: returns the image shape (one channel) and the
/// pixels of every image scaled to [0, 1].
pub fn load_idx_images(path: &Path) -> Result<(Shape, Vec<f64>)> {
    let bytes = read_maybe_gz(path)?;
    check_magic(&bytes, IDX_IMAGES_MAGIC, path)?;
    let count = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    let data = body(&bytes, 16, count.saturating_mul(rows).saturating_mul(cols), path)?;
    Ok((Shape::new(1, rows, cols), data.iter().map(|&p| f64::from(p) / 255.0).collect()))
}

pub fn load_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = read_maybe_gz(path)?;
    check_magic(&bytes, IDX_LABELS_MAGIC, path)?;
    let count = be_u32(&bytes, 4, path)? as usize;
    let data = body(&bytes, 8, count, path)?;
    if let Some(&l) = data.iter().find(|&&l| usize::from(l) >= NUM_CLASSES) {
        return Err(Error::Format { path: path.to_path_buf(), message: format!("label {l} outside 0..{NUM_CLASSES}") });
    }
    Ok(data.to_vec())
}

pub fn load_idx_dataset(images: &Path, labels: &Path) -> Result<Dataset> {
    let (shape, pixels) = load_idx_images(images)?;
    let labels_v = load_idx_labels(labels)?;
    let n_images = if shape.is_empty() { 0 } else { pixels.len() / shape.len() };
    if n_images != labels_v.len() {
        return Err(Error::CountMismatch { path: images.to_path_buf(), images: n_images, labels: labels_v.len() });
    }
    Dataset::new(shape, pixels, labels_v)
}

/// Standard file names of an MNIST-style directory.
#[derive(Debug, Clone)]
pub struct IdxPaths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

impl IdxPaths {
    /// Picks `name` or `name.gz` inside `dir`, preferring the uncompressed file.
    pub fn in_dir(dir: &Path) -> Self {
        let pick = |name: &str| {
            let plain = dir.join(name);
            if plain.exists() {
                plain
            } else {
                dir.join(format!("{name}.gz"))
            }
        };
        IdxPaths {
            train_images: pick("train-images-idx3-ubyte"),
            train_labels: pick("train-labels-idx1-ubyte"),
            test_images: pick("t10k-images-idx3-ubyte"),
            test_labels: pick("t10k-labels-idx1-ubyte"),
        }
    }

    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        Ok((
            load_idx_dataset(&self.train_images, &self.train_labels)?,
            load_idx_dataset(&self.test_images, &self.test_labels)?,
        ))
    }
}

/// Reads one or more Cifar-10 binary batches (label byte followed by the
/// red, green and blue 32x32 planes).
pub fn load_cifar_batches(paths: &[PathBuf]) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = read_maybe_gz(path)?;
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::Truncated {
                path: path.clone(),
                expected: bytes.len().div_ceil(CIFAR_RECORD) * CIFAR_RECORD,
                found: bytes.len(),
            });
        }
        for rec in bytes.chunks_exact(CIFAR_RECORD) {
            if usize::from(rec[0]) >= NUM_CLASSES {
                return Err(Error::Format { path: path.clone(), message: format!("label {} outside 0..10", rec[0]) });
            }
            labels.push(rec[0]);
            pixels.extend(rec[1..].iter().map(|&p| f64::from(p) / 255.0));
        }
    }
    Dataset::new(Shape::new(3, CIFAR_SIDE, CIFAR_SIDE), pixels, labels)
}
