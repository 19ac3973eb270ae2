use std::path::Path;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 3073;

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format("truncated IDX header"))
}

/// Reads an IDX image file and its label file; pixels are scaled to `[0, 1]`.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<LabeledDataset> {
    parse_idx(&read(images.as_ref())?, &read(labels.as_ref())?)
}

pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<LabeledDataset> {
    let magic = be_u32(images, 0)?;
    if magic != IDX_IMAGES {
        return Err(Error::format(format!(
            "image file magic {magic:#010x}, expected {IDX_IMAGES:#010x}"
        )));
    }
    let n = be_u32(images, 4)? as usize;
    let rows = be_u32(images, 8)? as usize;
    let cols = be_u32(images, 12)? as usize;
    let dim = rows * cols;
    let pixels = images
        .get(16..16 + n * dim)
        .ok_or_else(|| Error::format(format!("image file holds fewer than {n} {rows}x{cols} images")))?;

    let magic = be_u32(labels, 0)?;
    if magic != IDX_LABELS {
        return Err(Error::format(format!(
            "label file magic {magic:#010x}, expected {IDX_LABELS:#010x}"
        )));
    }
    let n_labels = be_u32(labels, 4)? as usize;
    let label_bytes = labels
        .get(8..8 + n_labels)
        .ok_or_else(|| Error::format(format!("label file holds fewer than {n_labels} labels")))?;
    if n_labels != n {
        return Err(Error::Consistency(format!("{n} images but {n_labels} labels")));
    }
    if dim == 0 {
        return Err(Error::format("zero-sized images"));
    }
    let labels: Vec<usize> = label_bytes.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(0, |&m| m + 1).max(10);
    let features = pixels.iter().map(|&p| f32::from(p) / 255.0).collect();
    LabeledDataset::new(features, dim, labels, classes)
}

/// Reads and concatenates CIFAR-10 binary batches.
pub fn load_cifar10_bin<P: AsRef<Path>>(paths: &[P]) -> Result<LabeledDataset> {
    let mut bytes = Vec::new();
    for p in paths {
        let chunk = read(p.as_ref())?;
        if chunk.len() % CIFAR_RECORD != 0 {
            return Err(Error::format(format!(
                "{}: {} bytes is not a whole number of {CIFAR_RECORD}-byte records",
                p.as_ref().display(),
                chunk.len()
            )));
        }
        bytes.extend(chunk);
    }
    parse_cifar10(&bytes)
}

/// Parses `label, 3072 channel-major pixels` records.
pub fn parse_cifar10(bytes: &[u8]) -> Result<LabeledDataset> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::format(format!(
            "{} bytes is not a whole number of {CIFAR_RECORD}-byte records",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut features = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for record in bytes.chunks_exact(CIFAR_RECORD) {
        if record[0] > 9 {
            return Err(Error::format(format!("label byte {} > 9", record[0])));
        }
        labels.push(record[0] as usize);
        features.extend(record[1..].iter().map(|&p| f32::from(p) / 255.0));
    }
    LabeledDataset::new(features, CIFAR_RECORD - 1, labels, 10)
}
