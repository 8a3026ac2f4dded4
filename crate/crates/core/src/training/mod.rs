//! Loss, optimizer, the training loop with early stopping, and evaluation.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_check, CheckOptions, GradCheckReport, Gradients, ParamId, Tape, Var};
use crate::data::{permutation, sequential_batches, LabeledImageSet};
use crate::layers::{ParamStore, Pass, Phase};
use crate::models::{audit_params, Model};
use crate::{exec, Error, Real, Result, Tensor};

/// Mean softmax cross-entropy of `[N, C]` logits.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.softmax_cross_entropy(logits, labels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: Real,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation-loss improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            batch_size: 64,
            max_epochs: 30,
            patience: 3,
            seed: 0,
            eval_batch_size: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            // training-mode batch norm needs two samples per batch
            && self.batch_size >= 2
            && self.max_epochs >= 1
            && self.patience >= 1
            && self.eval_batch_size >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::IncompatibleSpec(format!("invalid training config {self:?}")))
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
    t: u32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &[Tensor], lr: Real) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn steps(&self) -> u32 {
        self.t
    }

    /// Apply one update. Parameters without a gradient are left alone.
    pub fn step(&mut self, params: &mut [Tensor], grads: &Gradients) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::ShapeMismatch(format!(
                "optimizer tracks {} tensors, got {}",
                self.m.len(),
                params.len()
            )));
        }
        for (id, g) in grads.params() {
            let p = params.get(id.0).ok_or_else(|| {
                Error::ShapeMismatch(format!("gradient for unknown parameter {}", id.0))
            })?;
            p.expect_same_shape(g)?;
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = grads.param(ParamId(i)) else { continue };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *p -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Early stopping on validation loss.
#[derive(Clone, Debug)]
pub struct EarlyStopper {
    patience: usize,
    best: Option<(usize, Real)>,
    stale: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: None,
            stale: 0,
        }
    }

    /// Record an epoch's validation loss; returns whether it is the new best.
    pub fn observe(&mut self, epoch: usize, loss: Real) -> bool {
        match self.best {
            Some((_, b)) if loss >= b => {
                self.stale += 1;
                false
            }
            _ => {
                self.best = Some((epoch, loss));
                self.stale = 0;
                true
            }
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }

    pub fn best(&self) -> Option<(usize, Real)> {
        self.best
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub loss: Real,
    pub accuracy: Real,
    pub correct: usize,
    pub total: usize,
}

/// Inference-mode loss and top-1 accuracy. Batches may run in parallel; the
/// sums are reduced in batch order.
pub fn evaluate(model: &Model, set: &LabeledImageSet, batch_size: usize) -> Result<Evaluation> {
    if model.classes() != set.classes() {
        return Err(Error::ClassCountMismatch {
            source_classes: set.classes(),
            target_classes: model.classes(),
        });
    }
    let batches: Vec<_> = sequential_batches(set, batch_size)?.collect();
    let parts = exec::map(batches.len(), |i| -> Result<(Real, usize)> {
        let b = &batches[i];
        let logits = model.predict(&b.images)?;
        let mut tape = Tape::new();
        let l = tape.leaf(logits.clone(), false);
        let loss = cross_entropy(&mut tape, l, &b.labels)?;
        let correct = count_correct(&logits, &b.labels);
        Ok((tape.value(loss).item() * b.labels.len() as Real, correct))
    });
    let (mut loss, mut correct) = (0.0, 0);
    for p in parts {
        let (l, c) = p?;
        loss += l;
        correct += c;
    }
    let total = set.len();
    Ok(Evaluation {
        loss: loss / total as Real,
        accuracy: correct as Real / total as Real,
        correct,
        total,
    })
}

/// Rows of `[N, C]` logits whose first maximum sits at the label.
pub fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let c = logits.dims()[1];
    logits
        .data()
        .chunks(c)
        .zip(labels)
        .filter(|(row, &label)| argmax(row) == label)
        .count()
}

pub fn argmax(row: &[Real]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Training-mode forward pass, backward pass and Adam update on one batch.
/// Returns the batch loss before the update.
pub fn train_step(model: &mut Model, adam: &mut Adam, images: &Tensor, labels: &[usize]) -> Result<Real> {
    let mut tape = Tape::new();
    let params = ParamStore::register(model.params(), &mut tape);
    let x = tape.leaf(images.clone(), false);
    let mut stats = model.store().stats().to_vec();
    let loss = {
        let mut pass = Pass {
            tape: &mut tape,
            params: &params,
            stats: &mut stats,
            phase: Phase::Train,
        };
        let logits = model.forward(&mut pass, x)?;
        cross_entropy(pass.tape, logits, labels)?
    };
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Numeric(format!("loss is {value}")));
    }
    let grads = tape.backward(loss)?;
    model.store_mut().stats_mut().clone_from_slice(&stats);
    adam.step(model.params_mut(), &grads)?;
    Ok(value)
}

/// Finite-difference check of every parameter tensor of `model` on one
/// batch, with the training-mode loss.
pub fn model_grad_check(
    model: &Model,
    images: &Tensor,
    labels: &[usize],
    opts: &CheckOptions,
) -> Result<GradCheckReport> {
    let base_stats = model.store().stats().to_vec();
    grad_check(model.params(), model.param_names(), opts, |tape, ps| {
        let params = ParamStore::register(ps, tape);
        let x = tape.leaf(images.clone(), false);
        let mut stats = base_stats.clone();
        let mut pass = Pass {
            tape,
            params: &params,
            stats: &mut stats,
            phase: Phase::Train,
        };
        let logits = model.forward(&mut pass, x)?;
        cross_entropy(pass.tape, logits, labels)
    })
}

/// Loss of `images` under training-mode statistics, without side effects.
pub fn batch_loss(model: &Model, images: &Tensor, labels: &[usize]) -> Result<Real> {
    let mut tape = Tape::new();
    let params = ParamStore::register(model.params(), &mut tape);
    let x = tape.leaf(images.clone(), false);
    let mut stats = model.store().stats().to_vec();
    let mut pass = Pass {
        tape: &mut tape,
        params: &params,
        stats: &mut stats,
        phase: Phase::Train,
    };
    let logits = model.forward(&mut pass, x)?;
    let loss = cross_entropy(&mut tape, logits, labels)?;
    Ok(tape.value(loss).item())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: Real,
    pub val_loss: Real,
    pub val_acc: Real,
    /// SHA-256 of the training set as fed to the shuffler, hex.
    pub input_digest: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct ExperimentReport {
    pub model: String,
    pub param_count: usize,
    pub config: TrainConfig,
    pub train_size: usize,
    pub val_size: usize,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: Real,
    pub best_val_acc: Real,
    pub stopped_early: bool,
    pub wall_seconds: f64,
    pub audit_total: usize,
}

impl ExperimentReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// `epoch,train_loss,val_loss,val_acc`, one row per epoch.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,val_acc\n");
        for e in &self.epochs {
            writeln!(out, "{},{:?},{:?},{:?}", e.epoch, e.train_loss, e.val_loss, e.val_acc)
                .expect("write to String");
        }
        out
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Split a permutation into batches; a trailing single sample joins the
/// previous batch because training-mode normalization needs two.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let order = permutation(n, seed, epoch);
    let mut out: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(last);
    }
    out
}

/// Train until validation loss stops improving for `patience` epochs or
/// `max_epochs` is reached. On return `model` holds the best epoch's
/// parameters and statistics.
pub fn train(
    model: &mut Model,
    train_set: &LabeledImageSet,
    val_set: &LabeledImageSet,
    cfg: &TrainConfig,
) -> Result<ExperimentReport> {
    train_with_callback(model, train_set, val_set, cfg, |_| {})
}

/// [`train`], calling `on_epoch` after every epoch.
pub fn train_with_callback(
    model: &mut Model,
    train_set: &LabeledImageSet,
    val_set: &LabeledImageSet,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<ExperimentReport> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::DataEmpty);
    }
    for set in [train_set, val_set] {
        if set.classes() != model.classes() {
            return Err(Error::ClassCountMismatch {
                source_classes: set.classes(),
                target_classes: model.classes(),
            });
        }
    }
    let start = Instant::now();
    let mut adam = Adam::new(model.params(), cfg.learning_rate);
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut best = model.clone();
    let mut epochs = Vec::new();
    let mut stopped_early = false;

    let digest = hex(&train_set.digest());
    for epoch in 1..=cfg.max_epochs {
        let mut loss_sum = 0.0;
        for (bi, idx) in epoch_batches(train_set.len(), cfg.batch_size, cfg.seed, epoch as u64)
            .into_iter()
            .enumerate()
        {
            let (images, labels) = train_set.select(&idx)?;
            let loss = train_step(model, &mut adam, &images, &labels).map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("epoch {epoch}, batch {bi}: {m}")),
                other => other,
            })?;
            loss_sum += loss * idx.len() as Real;
        }
        let val = evaluate(model, val_set, cfg.eval_batch_size)?;
        if !val.loss.is_finite() {
            return Err(Error::Numeric(format!("validation loss is {} at epoch {epoch}", val.loss)));
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as Real,
            val_loss: val.loss,
            val_acc: val.accuracy,
            input_digest: digest.clone(),
        };
        on_epoch(&record);
        epochs.push(record);
        if stopper.observe(epoch, val.loss) {
            best = model.clone();
        }
        if stopper.should_stop() {
            stopped_early = epoch < cfg.max_epochs;
            break;
        }
    }

    let (best_epoch, best_val_loss) = stopper.best().expect("at least one epoch ran");
    *model = best;
    Ok(ExperimentReport {
        model: model.spec().name.clone(),
        param_count: model.param_count(),
        config: cfg.clone(),
        train_size: train_set.len(),
        val_size: val_set.len(),
        best_val_acc: epochs[best_epoch - 1].val_acc,
        epochs,
        best_epoch,
        best_val_loss,
        stopped_early,
        wall_seconds: start.elapsed().as_secs_f64(),
        audit_total: audit_params(model.spec())?.total,
    })
}
