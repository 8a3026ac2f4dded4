//! Fast gradient sign attacks, epsilon sweeps and transfer attacks.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{sequential_batches, Batch, LabeledImageSet};
use crate::layers::{ParamStore, Pass, Phase};
use crate::models::Model;
use crate::tensor::sign;
use crate::training::{count_correct, cross_entropy};
use crate::{exec, Error, Real, Result, Tensor};

pub const DEFAULT_EPSILONS: [Real; 7] = [0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Ascending, each in `[0, 1]`.
    pub epsilons: Vec<Real>,
    pub batch_size: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            epsilons: DEFAULT_EPSILONS.to_vec(),
            batch_size: 500,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        let in_range = self.epsilons.iter().all(|e| (0.0..=1.0).contains(e));
        let sorted = self.epsilons.windows(2).all(|w| w[0] <= w[1]);
        if self.epsilons.is_empty() || !in_range || !sorted || self.batch_size == 0 {
            return Err(Error::IncompatibleSpec(format!(
                "epsilons must be a non-empty ascending list in [0, 1], got {:?}",
                self.epsilons
            )));
        }
        Ok(())
    }
}

/// Gradient of the mean cross-entropy with respect to the input pixels,
/// with the model in inference mode.
pub fn input_gradient(model: &Model, images: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let params = ParamStore::register(model.params(), &mut tape);
    let mut stats = model.store().stats().to_vec();
    let x = tape.leaf(images.clone(), true);
    let mut pass = Pass {
        tape: &mut tape,
        params: &params,
        stats: &mut stats,
        phase: Phase::Eval,
    };
    let logits = model.forward(&mut pass, x)?;
    let loss = cross_entropy(&mut tape, logits, labels)?;
    let grads = tape.backward(loss)?;
    Ok(grads.wrt(x).expect("input requested a gradient").clone())
}

/// `clip(x + ε·sign(g), 0, 1)`, nudged by one ulp where rounding would
/// otherwise push a coordinate more than `ε` away from `x`.
pub fn perturb(images: &Tensor, grad: &Tensor, eps: Real) -> Result<Tensor> {
    images.expect_same_shape(grad)?;
    if eps == 0.0 {
        return Ok(images.clone());
    }
    let data = images
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&x, &g)| {
            let mut y = (x + eps * sign(g)).clamp(0.0, 1.0);
            while (y - x).abs() > eps {
                y = if y > x { y.next_down() } else { y.next_up() };
            }
            y
        })
        .collect();
    Tensor::new(images.shape().clone(), data)
}

/// White-box FGSM with true labels.
pub fn fgsm(model: &Model, images: &Tensor, labels: &[usize], eps: Real) -> Result<Tensor> {
    if eps < 0.0 || eps.is_nan() {
        return Err(Error::IncompatibleSpec(format!("epsilon must be non-negative, got {eps}")));
    }
    if eps == 0.0 {
        return Ok(images.clone());
    }
    let g = input_gradient(model, images, labels)?;
    perturb(images, &g, eps)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub epsilon: Real,
    pub accuracy: Real,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RobustnessCurve {
    /// Model whose accuracy is measured.
    pub model: String,
    pub param_count: usize,
    /// Model the perturbations were computed on, when different.
    pub source: Option<String>,
    pub points: Vec<CurvePoint>,
}

impl RobustnessCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epsilon,accuracy\n");
        for p in &self.points {
            writeln!(out, "{:?},{:?}", p.epsilon, p.accuracy).expect("write to String");
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("curve serializes")
    }

    pub fn accuracy_at(&self, eps: Real) -> Option<Real> {
        self.points.iter().find(|p| p.epsilon == eps).map(|p| p.accuracy)
    }
}

/// Accuracy of `target` on FGSM examples crafted on `source`.
pub fn transfer_attack(
    source: &Model,
    target: &Model,
    set: &LabeledImageSet,
    cfg: &AttackConfig,
) -> Result<RobustnessCurve> {
    cfg.validate()?;
    if source.classes() != target.classes() {
        return Err(Error::ClassCountMismatch {
            source_classes: source.classes(),
            target_classes: target.classes(),
        });
    }
    if set.classes() != target.classes() {
        return Err(Error::ClassCountMismatch {
            source_classes: set.classes(),
            target_classes: target.classes(),
        });
    }
    let batches: Vec<Batch> = sequential_batches(set, cfg.batch_size)?.collect();
    let per_batch = exec::map(batches.len(), |i| -> Result<Vec<usize>> {
        let b = &batches[i];
        let needs_grad = cfg.epsilons.iter().any(|&e| e > 0.0);
        let grad = if needs_grad {
            Some(input_gradient(source, &b.images, &b.labels)?)
        } else {
            None
        };
        cfg.epsilons
            .iter()
            .map(|&eps| {
                let adv = match &grad {
                    Some(g) if eps > 0.0 => perturb(&b.images, g, eps)?,
                    _ => b.images.clone(),
                };
                Ok(count_correct(&target.predict(&adv)?, &b.labels))
            })
            .collect()
    });
    let mut correct = vec![0usize; cfg.epsilons.len()];
    for counts in per_batch {
        for (c, n) in correct.iter_mut().zip(counts?) {
            *c += n;
        }
    }
    let same = std::ptr::eq(source, target);
    Ok(RobustnessCurve {
        model: target.spec().name.clone(),
        param_count: target.param_count(),
        source: (!same).then(|| source.spec().name.clone()),
        points: cfg
            .epsilons
            .iter()
            .zip(correct)
            .map(|(&epsilon, c)| CurvePoint {
                epsilon,
                accuracy: c as Real / set.len() as Real,
            })
            .collect(),
    })
}

/// White-box robustness curve.
pub fn sweep(model: &Model, set: &LabeledImageSet, cfg: &AttackConfig) -> Result<RobustnessCurve> {
    transfer_attack(model, model, set, cfg)
}

#[cfg(test)]
mod tests;
