//! Adam optimization, the epoch loop and early stopping.

use std::fmt::Write as _;

use indexmap::IndexMap;

use crate::datagrid::PatchSet;
use crate::error::{Error, Result};
use crate::losses::{combined_loss, LossComponents, LossConfig};
use crate::metrics::ConfusionMatrix;
use crate::model::{forward, predict_classes, ModelParams};
use crate::rng::{derive_seed, CounterRng};
use crate::tensor::{Mode, Tape, Tensor};

pub const ADAM_BETA1: f32 = 0.9;
pub const ADAM_BETA2: f32 = 0.999;
pub const ADAM_EPS: f32 = 1e-8;
/// Smallest validation improvement that resets the patience counter.
pub const MIN_DELTA: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub seed: u64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 1e-5,
            batch_size: 16,
            max_epochs: 50,
            early_stop_patience: 10,
            seed: 42,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 || self.early_stop_patience == 0 {
            return Err(Error::invalid("batch_size, max_epochs and patience must be ≥ 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::invalid(format!("learning rate {} must be ≥ 0", self.learning_rate)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::invalid(format!("weight decay {} must be ≥ 0", self.weight_decay)));
        }
        self.loss.validate()
    }
}

/// First and second moments per parameter, keyed like the model.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: IndexMap<String, Tensor<f32>>,
    pub v: IndexMap<String, Tensor<f32>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(model: &ModelParams<f32>) -> Self {
        let zeros = |p: &Tensor<f32>| Tensor::zeros_like(p);
        Self {
            m: model.params.iter().map(|(k, p)| (k.clone(), zeros(p))).collect(),
            v: model.params.iter().map(|(k, p)| (k.clone(), zeros(p))).collect(),
            t: 0,
        }
    }
}

/// One Adam update with L2 decay folded into the gradient.
pub fn adam_step(
    model: &mut ModelParams<f32>,
    grads: &IndexMap<String, Tensor<f32>>,
    state: &mut AdamState,
    learning_rate: f32,
    weight_decay: f32,
) -> Result<()> {
    for (name, p) in &model.params {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::invalid(format!("no gradient for {name}")))?;
        let m = state
            .m
            .get(name)
            .ok_or_else(|| Error::invalid(format!("optimizer state lacks {name}")))?;
        for (op, other) in [("adam_step", g), ("adam_step", m), ("adam_step", &state.v[name])] {
            if other.shape() != p.shape() {
                return Err(Error::ShapeMismatch {
                    op,
                    left: p.shape().to_vec(),
                    right: other.shape().to_vec(),
                });
            }
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = (1.0 - (ADAM_BETA1 as f64).powi(t)) as f32;
    let c2 = (1.0 - (ADAM_BETA2 as f64).powi(t)) as f32;
    for (name, p) in model.params.iter_mut() {
        let g = grads[name].data();
        let m = state.m[name].data_mut();
        let v = state.v[name].data_mut();
        for (((theta, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m).zip(v) {
            let gi = gi + weight_decay * *theta;
            *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
            *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *theta -= learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Forward, loss and backward on one batch, followed by an Adam update.
pub fn train_step(
    model: &mut ModelParams<f32>,
    adam: &mut AdamState,
    patches: &PatchSet,
    indices: &[usize],
    config: &TrainConfig,
    dropout_seed: u64,
) -> Result<LossComponents> {
    let batch = patches.batch(indices)?;
    let mut tape = Tape::new();
    let x = tape.constant(batch.inputs);
    let (out, vars) = forward(model, &mut tape, x, Mode::Train, dropout_seed)?;
    let (loss, components) = combined_loss(&mut tape, out.probs, &batch.labels, &batch.mask, &config.loss)?;
    let mut grads = tape.backward(loss)?;
    let grads: IndexMap<String, Tensor<f32>> = vars
        .iter()
        .map(|(name, &v)| {
            let g = grads
                .take(v)
                .unwrap_or_else(|| Tensor::zeros_like(&model.params[name]));
            (name.clone(), g)
        })
        .collect();
    adam_step(model, &grads, adam, config.learning_rate, config.weight_decay)?;
    Ok(components)
}

fn check_indices(patches: &PatchSet, indices: &[usize], what: &str) -> Result<()> {
    if indices.is_empty() {
        return Err(Error::invalid(format!("{what} set is empty")));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= patches.len()) {
        return Err(Error::invalid(format!("{what} patch {bad} out of range")));
    }
    Ok(())
}

/// One pass over `train` in an order shuffled from `seed ⊕ epoch`.
/// Returns the mean of the per-batch losses.
pub fn train_epoch(
    model: &mut ModelParams<f32>,
    adam: &mut AdamState,
    patches: &PatchSet,
    train: &[usize],
    config: &TrainConfig,
    epoch: usize,
) -> Result<LossComponents> {
    check_indices(patches, train, "training")?;
    let epoch_seed = config.seed ^ epoch as u64;
    let mut order = train.to_vec();
    CounterRng::new(epoch_seed, 0x5A).shuffle(&mut order);
    let mut sum = LossComponents::default();
    let mut batches = 0usize;
    for (b, chunk) in order.chunks(config.batch_size).enumerate() {
        let dropout_seed = derive_seed(epoch_seed, b as u64);
        let c = train_step(model, adam, patches, chunk, config, dropout_seed)?;
        sum.total += c.total;
        sum.focal += c.focal;
        sum.dice += c.dice;
        batches += 1;
    }
    let n = batches as f64;
    Ok(LossComponents {
        total: sum.total / n,
        focal: sum.focal / n,
        dice: sum.dice / n,
    })
}

/// Loss in eval mode, batched in index order and averaged with weights
/// proportional to batch length.
pub fn evaluate_loss(
    model: &mut ModelParams<f32>,
    patches: &PatchSet,
    indices: &[usize],
    config: &TrainConfig,
) -> Result<LossComponents> {
    check_indices(patches, indices, "evaluation")?;
    let mut sum = LossComponents::default();
    for chunk in indices.chunks(config.batch_size) {
        let batch = patches.batch(chunk)?;
        let mut tape = Tape::new();
        let x = tape.constant(batch.inputs);
        let (out, _) = forward(model, &mut tape, x, Mode::Eval, 0)?;
        let (_, c) = combined_loss(&mut tape, out.probs, &batch.labels, &batch.mask, &config.loss)?;
        let w = chunk.len() as f64;
        sum.total += w * c.total;
        sum.focal += w * c.focal;
        sum.dice += w * c.dice;
    }
    let n = indices.len() as f64;
    Ok(LossComponents {
        total: sum.total / n,
        focal: sum.focal / n,
        dice: sum.dice / n,
    })
}

/// Arg-max class maps, `[len][z][z]`, for the given patches in eval mode.
pub fn predict_patches(
    model: &mut ModelParams<f32>,
    patches: &PatchSet,
    indices: &[usize],
    batch_size: usize,
) -> Result<Vec<u8>> {
    let zz = patches.patch_size * patches.patch_size;
    let mut out = Vec::with_capacity(indices.len() * zz);
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = patches.batch(chunk)?;
        let mut tape = Tape::new();
        let x = tape.constant(batch.inputs);
        let (fwd, _) = forward(model, &mut tape, x, Mode::Eval, 0)?;
        out.extend(predict_classes(tape.value(fwd.probs))?);
    }
    Ok(out)
}

/// Confusion matrix pooled over the labeled cells of the given patches.
pub fn evaluate_confusion(
    model: &mut ModelParams<f32>,
    patches: &PatchSet,
    indices: &[usize],
    batch_size: usize,
) -> Result<ConfusionMatrix> {
    check_indices(patches, indices, "evaluation")?;
    let pred = predict_patches(model, patches, indices, batch_size)?;
    let zz = patches.patch_size * patches.patch_size;
    let mut cm = ConfusionMatrix::new(model.config.num_classes);
    for (i, &p) in indices.iter().enumerate() {
        cm.accumulate(
            &pred[i * zz..(i + 1) * zz],
            patches.patch_labels(p),
            Some(patches.patch_mask(p)),
        )?;
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossComponents,
    pub val: LossComponents,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub best: ModelParams<f32>,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

impl FitResult {
    pub fn best_val_loss(&self) -> f64 {
        self.history[self.best_epoch - 1].val.total
    }
}

/// Trains until `max_epochs` or until the validation loss has not improved
/// by more than [`MIN_DELTA`] for `patience` epochs. The returned model is
/// the one with the lowest validation loss seen, batchnorm statistics
/// included.
pub fn fit(
    model: &mut ModelParams<f32>,
    patches: &PatchSet,
    train: &[usize],
    val: &[usize],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<FitResult> {
    config.validate()?;
    check_indices(patches, train, "training")?;
    check_indices(patches, val, "validation")?;
    let mut adam = AdamState::new(model);
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, ModelParams<f32>)> = None;
    let mut reference = f64::INFINITY;
    let mut stale = 0;
    for epoch in 1..=config.max_epochs {
        let train_loss = train_epoch(model, &mut adam, patches, train, config, epoch)?;
        let val_loss = evaluate_loss(model, patches, val, config)?;
        if !val_loss.total.is_finite() || !train_loss.total.is_finite() {
            return Err(Error::NonFinite { op: "fit" });
        }
        let rec = EpochRecord {
            epoch,
            train: train_loss,
            val: val_loss,
        };
        on_epoch(&rec);
        history.push(rec);

        if best.as_ref().map_or(true, |b| val_loss.total < b.1) {
            best = Some((epoch, val_loss.total, model.clone()));
        }
        if val_loss.total < reference - MIN_DELTA {
            reference = val_loss.total;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.early_stop_patience {
                break;
            }
        }
    }
    let (best_epoch, _, best) = best.expect("at least one epoch ran");
    Ok(FitResult {
        best,
        best_epoch,
        history,
    })
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_total,train_focal,train_dice,val_total,val_focal,val_dice\n");
    for r in history {
        let _ = writeln!(
            out,
            "{},{:.8},{:.8},{:.8},{:.8},{:.8},{:.8}",
            r.epoch, r.train.total, r.train.focal, r.train.dice, r.val.total, r.val.focal, r.val.dice
        );
    }
    out
}
