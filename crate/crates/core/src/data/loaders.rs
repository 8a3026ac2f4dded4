//! IDX (MNIST) and CIFAR binary readers.

use std::fs;
use std::path::{Path, PathBuf};

use super::{scale_pixel, LabeledImageSet};
use crate::{Error, Result, Shape, Tensor};

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Format(format!("{}: header truncated", path.display())))
}

fn read_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IDX_IMAGES {
        return Err(Error::Format(format!(
            "{}: image magic {magic:#010x}, expected {IDX_IMAGES:#010x}",
            path.display()
        )));
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    let expected = n * rows * cols;
    let payload = &bytes[16..];
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "{}: expected {expected} pixel bytes, found {}",
            path.display(),
            payload.len()
        )));
    }
    Ok((n, rows, cols, payload.to_vec()))
}

fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IDX_LABELS {
        return Err(Error::Format(format!(
            "{}: label magic {magic:#010x}, expected {IDX_LABELS:#010x}",
            path.display()
        )));
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    let payload = &bytes[8..];
    if payload.len() != n {
        return Err(Error::Format(format!(
            "{}: expected {n} label bytes, found {}",
            path.display(),
            payload.len()
        )));
    }
    Ok(payload.to_vec())
}

/// Read an IDX image file and its label file.
pub fn load_mnist(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<LabeledImageSet> {
    let (n, rows, cols, pixels) = read_idx_images(images.as_ref())?;
    let labels = read_idx_labels(labels.as_ref())?;
    if labels.len() != n {
        return Err(Error::Format(format!(
            "{n} images but {} labels",
            labels.len()
        )));
    }
    if n == 0 {
        return Err(Error::DataEmpty);
    }
    let data = pixels.into_iter().map(scale_pixel).collect();
    let images = Tensor::new(Shape::new([n, 1, rows, cols])?, data)?;
    LabeledImageSet::new(images, labels.into_iter().map(usize::from).collect(), 10)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// MNIST from a dataset root: accepts `<root>/mnist/` or `<root>/` holding the
/// standard uncompressed file names.
pub fn load_mnist_split(root: impl AsRef<Path>, split: Split) -> Result<LabeledImageSet> {
    let stem = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let root = root.as_ref();
    let candidates: [PathBuf; 2] = [root.join("mnist"), root.to_path_buf()];
    for dir in &candidates {
        let images = dir.join(format!("{stem}-images-idx3-ubyte"));
        let labels = dir.join(format!("{stem}-labels-idx1-ubyte"));
        if images.is_file() && labels.is_file() {
            return load_mnist(images, labels);
        }
    }
    Err(Error::Io(std::io::Error::new(
        std::io::ErrorKind::NotFound,
        format!("no MNIST {stem} files under {}", root.display()),
    )))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    fn label_bytes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1,
            CifarVariant::Cifar100 => 2,
        }
    }

    pub fn classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }
}

const CIFAR_PIXELS: usize = 3 * 32 * 32;

/// Concatenate CIFAR binary batch files. CIFAR-100 records carry a coarse and
/// a fine label byte; the fine label is used.
pub fn load_cifar<P: AsRef<Path>>(paths: &[P], variant: CifarVariant) -> Result<LabeledImageSet> {
    let record = variant.label_bytes() + CIFAR_PIXELS;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for p in paths {
        let p = p.as_ref();
        let bytes = fs::read(p)?;
        if bytes.len() % record != 0 {
            return Err(Error::Format(format!(
                "{}: {} bytes is not a multiple of the {record}-byte record",
                p.display(),
                bytes.len()
            )));
        }
        for rec in bytes.chunks_exact(record) {
            let label = rec[variant.label_bytes() - 1] as usize;
            labels.push(label);
            data.extend(rec[variant.label_bytes()..].iter().map(|&b| scale_pixel(b)));
        }
    }
    if labels.is_empty() {
        return Err(Error::DataEmpty);
    }
    let images = Tensor::new(Shape::new([labels.len(), 3, 32, 32])?, data)?;
    LabeledImageSet::new(images, labels, variant.classes())
}
