use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::arch::TrainConfig;
use super::network::{Batch, ForwardCtx, Model, NormMode};
use crate::abstraction::{RegionOccupancy, RelativeSequence, Sample};
use crate::error::{Error, Result};
use crate::numcore::{loss, AdamState, Tensor};
use crate::rng::{self, tag};

const EVAL_CHUNK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were restored.
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

impl History {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.best_epoch.and_then(|e| self.epochs.iter().find(|r| r.epoch == e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Stalled,
    Stop,
}

/// Stops once the monitored accuracy has failed to strictly exceed its best
/// value for `patience` consecutive epochs.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    pub patience: usize,
    best: Option<f64>,
    best_epoch: Option<usize>,
    stalls: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: None, best_epoch: None, stalls: 0 }
    }

    pub fn observe(&mut self, epoch: usize, acc: f64) -> Verdict {
        if self.best.is_none_or(|b| acc > b) {
            self.best = Some(acc);
            self.best_epoch = Some(epoch);
            self.stalls = 0;
            return Verdict::Improved;
        }
        self.stalls += 1;
        if self.stalls >= self.patience {
            Verdict::Stop
        } else {
            Verdict::Stalled
        }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn batch_accuracy(probs: &Tensor, labels: &[usize]) -> usize {
    labels.iter().enumerate().filter(|&(i, &y)| argmax(probs.row(i)) == y).count()
}

/// Shuffled mini-batches for one epoch; a trailing single-sample batch is
/// merged into its predecessor so batch statistics stay defined.
fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[tag::EPOCH_SHUFFLE, epoch]));
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() >= 2 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(last);
    }
    batches
}

/// Result of one (possibly truncated) training pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochOutcome {
    pub loss: f64,
    pub acc: f64,
    pub steps: usize,
    pub samples_seen: usize,
    pub truncated: bool,
}

/// One pass of Adam updates over `samples`. Shuffling and dropout are keyed
/// by (`seed`, `epoch`). Returns sample-weighted mean (loss, accuracy)
/// measured in train mode.
pub fn train_epoch(
    model: &mut Model,
    adam: &mut AdamState,
    samples: &[Sample],
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<(f64, f64)> {
    let o = train_epoch_capped(model, adam, samples, batch_size, seed, epoch, None)?;
    Ok((o.loss, o.acc))
}

/// [`train_epoch`] that stops after `max_steps` optimizer steps.
pub fn train_epoch_capped(
    model: &mut Model,
    adam: &mut AdamState,
    samples: &[Sample],
    batch_size: usize,
    seed: u64,
    epoch: u64,
    max_steps: Option<usize>,
) -> Result<EpochOutcome> {
    if samples.is_empty() {
        return Err(Error::InsufficientData("no training samples".into()));
    }
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be at least 1"));
    }
    let batches = epoch_batches(samples.len(), batch_size, seed, epoch);
    let limit = max_steps.unwrap_or(usize::MAX).min(batches.len());
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let mut seen = 0usize;
    for (bi, idx) in batches.iter().take(limit).enumerate() {
        let batch = Batch::from_samples(idx.iter().map(|&i| &samples[i]), model.arch.k, model.arch.m)?;
        let masks = model.draw_masks(batch.len(), &mut rng::stream(seed, &[tag::DROPOUT, epoch, bi as u64]))?;
        let norm = if batch.len() >= 2 { NormMode::Batch } else { NormMode::Running };
        let cache = model.forward(&batch.seq, &batch.region, ForwardCtx { norm, masks: Some(&masks) })?;
        let l = loss::cross_entropy_labels(&batch.labels, &cache.probs)?;
        if !l.is_finite() {
            return Err(Error::NonFinite(format!("training loss at epoch {epoch}, batch {bi}")));
        }
        loss_sum += l * batch.len() as f64;
        correct += batch_accuracy(&cache.probs, &batch.labels);
        seen += batch.len();
        let grads = model.backward(&cache, &batch.labels)?;
        adam.step(&mut model.params, &grads.params)?;
        model.apply_running_updates(&cache);
    }
    let n = seen.max(1) as f64;
    Ok(EpochOutcome {
        loss: loss_sum / n,
        acc: correct as f64 / n,
        steps: limit,
        samples_seen: seen,
        truncated: limit < batches.len(),
    })
}

/// Inference-mode probabilities [N, n_classes].
pub fn predict_probs(model: &Model, samples: &[Sample]) -> Result<Tensor> {
    if samples.is_empty() {
        return Err(Error::InsufficientData("no samples to predict".into()));
    }
    let n = model.n_classes();
    let mut data = Vec::with_capacity(samples.len() * n);
    for chunk in samples.chunks(EVAL_CHUNK) {
        data.extend_from_slice(model.predict_batch(&model.batch(chunk)?)?.data());
    }
    Tensor::new(vec![samples.len(), n], data)
}

/// Inference-mode (mean cross-entropy, categorical accuracy).
pub fn evaluate_loss_acc(model: &Model, samples: &[Sample]) -> Result<(f64, f64)> {
    let probs = predict_probs(model, samples)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label.class_index).collect();
    let l = loss::cross_entropy_labels(&labels, &probs)?;
    Ok((l, batch_accuracy(&probs, &labels) as f64 / labels.len() as f64))
}

/// Trains with Adam and early stopping on validation accuracy, then
/// restores the parameters of the best epoch. An empty validation set makes
/// the training metrics the monitored ones.
pub fn fit(model: &mut Model, train: &[Sample], val: &[Sample], cfg: &TrainConfig) -> Result<History> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InsufficientData("training set is empty".into()));
    }
    let mut adam = AdamState::new(&model.params, cfg.lr);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut history = History::default();
    let mut best = None;
    for e in 0..cfg.max_epochs {
        let (train_loss, train_acc) = train_epoch(model, &mut adam, train, cfg.batch_size, cfg.seed, e as u64)?;
        let (val_loss, val_acc) = if val.is_empty() { (train_loss, train_acc) } else { evaluate_loss_acc(model, val)? };
        let rec = EpochRecord { epoch: e + 1, train_loss, train_acc, val_loss, val_acc };
        log::debug!("epoch {}: loss {train_loss:.4} acc {train_acc:.4} val_loss {val_loss:.4} val_acc {val_acc:.4}", e + 1);
        history.epochs.push(rec);
        match stopper.observe(e + 1, val_acc) {
            Verdict::Improved => best = Some(model.params.clone()),
            Verdict::Stalled => {}
            Verdict::Stop => {
                history.stopped_early = true;
                break;
            }
        }
    }
    if let Some(p) = best {
        model.params = p;
    }
    history.best_epoch = stopper.best_epoch();
    Ok(history)
}

/// Most probable cell for one input, with the full probability grid.
pub fn predict_cell(model: &Model, sequence: &RelativeSequence, region: &RegionOccupancy) -> Result<(usize, Vec<f64>)> {
    let (k, m) = (model.arch.k, model.arch.m);
    if sequence.deltas.len() != k || region.m != m {
        return Err(Error::Shape {
            context: "predict input (k, M) vs model",
            left: vec![sequence.deltas.len(), region.m],
            right: vec![k, m],
        });
    }
    let seq = Tensor::new(vec![1, k, 2], sequence.deltas.iter().flat_map(|d| [d.dx, d.dy]).collect())?;
    let reg = Tensor::new(vec![1, 1, m, m], region.values.clone())?;
    let probs = model.forward(&seq, &reg, ForwardCtx::INFER)?.probs.into_data();
    Ok((argmax(&probs), probs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_accuracy_stops_at_patience_plus_one() {
        for patience in 1..6 {
            let mut es = EarlyStopping::new(patience);
            let stop = (1..100).find(|&e| es.observe(e, 0.5) == Verdict::Stop).unwrap();
            assert_eq!(stop, patience + 1);
            assert_eq!(es.best_epoch(), Some(1));
        }
    }

    #[test]
    fn equal_value_is_not_an_improvement() {
        let mut es = EarlyStopping::new(3);
        assert_eq!(es.observe(1, 0.4), Verdict::Improved);
        assert_eq!(es.observe(2, 0.4), Verdict::Stalled);
        assert_eq!(es.observe(3, 0.41), Verdict::Improved);
        assert_eq!(es.best_epoch(), Some(3));
    }

    #[test]
    fn batches_cover_every_index_once() {
        for n in [1, 2, 5, 33, 65] {
            let b = epoch_batches(n, 32, 9, 0);
            let mut all: Vec<usize> = b.iter().flatten().copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..n).collect::<Vec<_>>());
            if n > 1 {
                assert!(b.iter().all(|x| x.len() >= 2));
            }
        }
        assert_eq!(epoch_batches(10, 4, 1, 3), epoch_batches(10, 4, 1, 3));
        assert_ne!(epoch_batches(10, 4, 1, 3), epoch_batches(10, 4, 1, 4));
    }
}
