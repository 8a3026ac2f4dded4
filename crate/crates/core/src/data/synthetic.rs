//! Gaussian class blobs rendered as images.
//!
//! Class `k` owns a contiguous block of pixels (in `[C, H, W]` order) and
//! brightens it by `margin · σ` spread over the block's unit direction `v_k`.
//! Noise is isotropic Gaussian except along each `v_k`, where it is truncated
//! to `|t| < margin · σ / 2`. Projecting onto the `v_k` therefore separates the
//! classes exactly whenever `margin > 0`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::LabeledImageSet;
use crate::{Real, Result, Shape, Tensor};

#[derive(Clone, Debug)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub per_class: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Distance between class means along their directions, in units of σ.
    pub margin: Real,
    /// Per-pixel noise standard deviation.
    pub sigma: Real,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            classes: 2,
            per_class: 100,
            channels: 1,
            height: 28,
            width: 28,
            margin: 3.0,
            sigma: 0.05,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    fn pixels(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Pixel range owned by class `k`.
    fn block(&self, k: usize) -> std::ops::Range<usize> {
        let p = self.pixels();
        k * p / self.classes..(k + 1) * p / self.classes
    }
}

/// Samples are interleaved by class: sample `i` has label `i % classes`.
pub fn make_synthetic(cfg: &SyntheticConfig) -> Result<LabeledImageSet> {
    let p = cfg.pixels();
    assert!(cfg.classes >= 1 && cfg.classes <= p, "each class needs at least one pixel");
    let n = cfg.classes * cfg.per_class;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.sigma as f64).expect("sigma is finite and non-negative");
    let half = cfg.margin * cfg.sigma / 2.0;
    let mut data = Vec::with_capacity(n * p);
    let mut labels = Vec::with_capacity(n);
    let mut img = vec![0.0 as Real; p];
    for i in 0..n {
        let label = i % cfg.classes;
        for v in img.iter_mut() {
            *v = noise.sample(&mut rng) as Real;
        }
        for k in 0..cfg.classes {
            let block = cfg.block(k);
            let scale = 1.0 / (block.len() as Real).sqrt();
            let proj: Real = img[block.clone()].iter().sum::<Real>() * scale;
            let t = truncated(&mut rng, &noise, half);
            let shift = (t - proj) * scale;
            img[block].iter_mut().for_each(|v| *v += shift);
        }
        let own = cfg.block(label);
        let lift = cfg.margin * cfg.sigma / (own.len() as Real).sqrt();
        img[own].iter_mut().for_each(|v| *v += lift);
        data.extend(img.iter().map(|v| (0.5 + v).clamp(0.0, 1.0)));
        labels.push(label);
    }
    let images = Tensor::new(Shape::new([n, cfg.channels, cfg.height, cfg.width])?, data)?;
    LabeledImageSet::new(images, labels, cfg.classes)
}

fn truncated<R: Rng>(rng: &mut R, noise: &Normal<f64>, bound: Real) -> Real {
    if bound <= 0.0 {
        return 0.0;
    }
    loop {
        let t = noise.sample(rng) as Real;
        if t.abs() < bound {
            return t;
        }
    }
}

/// Accuracy of the closed-form linear probe `argmax_k <x, v_k>` that the
/// generator is built around.
pub fn synthetic_probe_accuracy(set: &LabeledImageSet, cfg: &SyntheticConfig) -> Real {
    let p = cfg.pixels();
    let mut correct = 0;
    for (img, &label) in set.images().data().chunks(p).zip(set.labels()) {
        let mut best = (Real::NEG_INFINITY, 0);
        for k in 0..cfg.classes {
            let block = cfg.block(k);
            let score = img[block.clone()].iter().sum::<Real>() / (block.len() as Real).sqrt();
            // blocks of unequal size see different baseline brightness
            let baseline = 0.5 * (block.len() as Real).sqrt();
            let s = score - baseline;
            if s > best.0 {
                best = (s, k);
            }
        }
        correct += usize::from(best.1 == label);
    }
    correct as Real / set.len() as Real
}
