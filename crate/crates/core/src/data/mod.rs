//! Datasets: MNIST IDX and CIFAR binary loaders, synthetic class blobs, and
//! seeded batch iteration.
//!
//! Pixels are divided by 255 and nothing else. There is no mean/std
//! normalization and no augmentation anywhere in this module.

mod loaders;
mod synthetic;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use loaders::{load_cifar, load_mnist, load_mnist_split, CifarVariant, Split};
pub use synthetic::{make_synthetic, synthetic_probe_accuracy, SyntheticConfig};

use crate::{Error, Real, Result, Shape, Tensor};

/// Environment variable naming the dataset root.
pub const DATA_DIR_ENV: &str = "TENCONV_DATA_DIR";

/// Images `[N, C, H, W]` in `[0, 1]` with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImageSet {
    images: Tensor,
    labels: Vec<usize>,
    classes: usize,
}

impl LabeledImageSet {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "images must be [N, C, H, W], got {}",
                images.shape()
            )));
        }
        if labels.is_empty() {
            return Err(Error::DataEmpty);
        }
        if labels.len() != images.dims()[0] {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for {} images",
                labels.len(),
                images.dims()[0]
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        Ok(LabeledImageSet {
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// `[C, H, W]`.
    pub fn image_dims(&self) -> &[usize] {
        &self.images.dims()[1..]
    }

    fn image_len(&self) -> usize {
        self.image_dims().iter().product()
    }

    /// Images and labels at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        if indices.is_empty() {
            return Err(Error::DataEmpty);
        }
        let len = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::OutOfBounds(format!("sample {i} of {}", self.len())));
            }
            data.extend_from_slice(&self.images.data()[i * len..(i + 1) * len]);
            labels.push(self.labels[i]);
        }
        let mut dims = vec![indices.len()];
        dims.extend_from_slice(self.image_dims());
        Ok((Tensor::new(Shape::new(dims)?, data)?, labels))
    }

    /// Seeded subset of `n` samples, kept in original order.
    pub fn subset(&self, n: usize, seed: u64) -> Result<LabeledImageSet> {
        let n = n.min(self.len());
        let mut idx = permutation(self.len(), seed, 0);
        idx.truncate(n);
        idx.sort_unstable();
        let (images, labels) = self.select(&idx)?;
        LabeledImageSet::new(images, labels, self.classes)
    }

    /// SHA-256 over labels and pixel bits, in storage order.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for &l in &self.labels {
            h.update((l as u32).to_le_bytes());
        }
        for &v in self.images.data() {
            h.update((v as f64).to_le_bytes());
        }
        let mut out = [0u8; 32];
        out.copy_from_slice(&h.finalize());
        out
    }
}

/// Seeded permutation of `0..n` for one epoch.
pub fn permutation(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

/// One mini-batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

/// Iterator over the mini-batches of one epoch. The final partial batch is
/// included.
pub struct Batches<'a> {
    set: &'a LabeledImageSet,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Batches<'_> {
    /// Batch sizes this iterator will yield.
    pub fn sizes(&self) -> Vec<usize> {
        self.order
            .chunks(self.batch_size)
            .map(<[usize]>::len)
            .collect()
    }
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        let (images, labels) = self.set.select(&indices).expect("indices from a permutation");
        Some(Batch {
            images,
            labels,
            indices,
        })
    }
}

/// Shuffled batches for `(seed, epoch)`.
pub fn batches(set: &LabeledImageSet, batch_size: usize, seed: u64, epoch: u64) -> Result<Batches<'_>> {
    if set.is_empty() {
        return Err(Error::DataEmpty);
    }
    if batch_size == 0 {
        return Err(Error::ShapeMismatch("batch size must be positive".into()));
    }
    Ok(Batches {
        set,
        order: permutation(set.len(), seed, epoch),
        batch_size,
        pos: 0,
    })
}

/// Batches in storage order, for evaluation.
pub fn sequential_batches(set: &LabeledImageSet, batch_size: usize) -> Result<Batches<'_>> {
    if set.is_empty() {
        return Err(Error::DataEmpty);
    }
    if batch_size == 0 {
        return Err(Error::ShapeMismatch("batch size must be positive".into()));
    }
    Ok(Batches {
        set,
        order: (0..set.len()).collect(),
        batch_size,
        pos: 0,
    })
}

/// Dataset root: the explicit path if given, else `$TENCONV_DATA_DIR`.
pub fn data_root(explicit: Option<&Path>) -> Option<PathBuf> {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
}

/// Datasets addressable by name from a data root.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dataset {
    Mnist,
    Cifar10,
    Cifar100,
    /// Seeded class blobs shaped to the model; needs no files.
    Synthetic,
}

impl std::str::FromStr for Dataset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(Dataset::Mnist),
            "cifar10" => Ok(Dataset::Cifar10),
            "cifar100" => Ok(Dataset::Cifar100),
            "synthetic" => Ok(Dataset::Synthetic),
            other => Err(Error::IncompatibleSpec(format!(
                "unknown dataset '{other}' (mnist, cifar10, cifar100, synthetic)"
            ))),
        }
    }
}

impl Dataset {
    /// Load `split`. File-backed datasets need `root`; synthetic data takes its
    /// image shape and class count from `dims` and `classes`.
    pub fn load(
        self,
        root: Option<&Path>,
        split: Split,
        dims: [usize; 3],
        classes: usize,
    ) -> Result<LabeledImageSet> {
        let need_root = || {
            root.ok_or_else(|| {
                Error::Io(std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    format!("no data directory given (pass one or set {DATA_DIR_ENV})"),
                ))
            })
        };
        match self {
            Dataset::Mnist => load_mnist_split(need_root()?, split),
            Dataset::Cifar10 => {
                let dir = need_root()?.join("cifar-10-batches-bin");
                let files: Vec<PathBuf> = match split {
                    Split::Train => (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect(),
                    Split::Test => vec![dir.join("test_batch.bin")],
                };
                load_cifar(&files, CifarVariant::Cifar10)
            }
            Dataset::Cifar100 => {
                let dir = need_root()?.join("cifar-100-binary");
                let file = match split {
                    Split::Train => "train.bin",
                    Split::Test => "test.bin",
                };
                load_cifar(&[dir.join(file)], CifarVariant::Cifar100)
            }
            Dataset::Synthetic => {
                let [channels, height, width] = dims;
                let (per_class, seed) = match split {
                    Split::Train => (500, 0),
                    Split::Test => (100, 1),
                };
                make_synthetic(&SyntheticConfig {
                    classes,
                    per_class,
                    channels,
                    height,
                    width,
                    seed,
                    ..SyntheticConfig::default()
                })
            }
        }
    }
}

pub(crate) fn scale_pixel(b: u8) -> Real {
    b as Real / 255.0
}
