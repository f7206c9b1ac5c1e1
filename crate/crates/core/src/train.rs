//! Mini-batch training with step-decay Adam and early stopping, plus
//! confusion-matrix metrics.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Model;
use crate::preprocess::{SegmentSet, SplitSet};
use crate::scalar::Scalar;
use crate::tensor::{lr_at_epoch, Adam, Graph, OptimizerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop after this many epochs without a new best validation loss.
    pub early_stop_patience: usize,
    /// A validation loss counts as a new best only if it undercuts the
    /// previous best by more than this.
    pub min_delta: f64,
    /// Samples per forward/backward pass. Gradients of the chunks of one
    /// mini-batch are summed before the optimizer step, so this bounds
    /// memory without changing the update.
    pub micro_batch: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 300,
            max_epochs: 300,
            early_stop_patience: 30,
            min_delta: 0.0,
            micro_batch: 50,
            optimizer: OptimizerConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Short schedule for synthetic desk-scale runs.
    pub fn desk() -> Self {
        Self {
            batch_size: 32,
            max_epochs: 30,
            early_stop_patience: 6,
            min_delta: 1e-3,
            micro_batch: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("max_epochs", "must be at least 1"));
        }
        if self.early_stop_patience == 0 || self.early_stop_patience > self.max_epochs {
            return Err(Error::config(
                "early_stop_patience",
                format!(
                    "must lie in [1, max_epochs = {}], got {}",
                    self.max_epochs, self.early_stop_patience
                ),
            ));
        }
        if !(self.min_delta >= 0.0 && self.min_delta.is_finite()) {
            return Err(Error::config(
                "min_delta",
                "must be finite and non-negative",
            ));
        }
        if self.micro_batch == 0 {
            return Err(Error::config("micro_batch", "must be at least 1"));
        }
        self.optimizer.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose weights were kept.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl History {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,val_accuracy,lr\n");
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                e.epoch, e.train_loss, e.val_loss, e.val_accuracy, e.lr
            ));
        }
        s
    }
}

/// Confusion counts with ictal (label 1) as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when some ratio had a zero denominator and was reported as 0.
    pub degenerate: bool,
}

fn ratio(num: f64, den: f64, degenerate: &mut bool) -> f64 {
    if den == 0.0 {
        *degenerate = true;
        0.0
    } else {
        num / den
    }
}

/// Harmonic mean of precision and recall; `None` when both are zero.
pub fn f1_score(precision: f64, recall: f64) -> Option<f64> {
    let s = precision + recall;
    (s > 0.0).then(|| 2.0 * precision * recall / s)
}

impl Metrics {
    pub fn from_counts(tp: usize, fp: usize, tn: usize, fn_: usize) -> Self {
        let mut degenerate = false;
        let total = (tp + fp + tn + fn_) as f64;
        let accuracy = ratio((tp + tn) as f64, total, &mut degenerate);
        let precision = ratio(tp as f64, (tp + fp) as f64, &mut degenerate);
        let recall = ratio(tp as f64, (tp + fn_) as f64, &mut degenerate);
        let f1 = f1_score(precision, recall).unwrap_or_else(|| {
            degenerate = true;
            0.0
        });
        Self {
            tp,
            fp,
            tn,
            fn_,
            accuracy,
            precision,
            recall,
            f1,
            degenerate,
        }
    }

    pub fn from_predictions(predicted: &[usize], actual: &[usize]) -> Self {
        let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
        for (&p, &a) in predicted.iter().zip(actual) {
            match (p == 1, a == 1) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, false) => tn += 1,
                (false, true) => fn_ += 1,
            }
        }
        Self::from_counts(tp, fp, tn, fn_)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

fn argmax_rows<T: Scalar>(logits: &[T], classes: usize) -> Vec<usize> {
    logits
        .chunks(classes)
        .map(|row| {
            // first maximum wins
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Mean cross-entropy and predicted classes over a whole set, dropout off.
pub fn predict<T: Scalar>(
    model: &Model<T>,
    set: &SegmentSet,
    micro_batch: usize,
) -> Result<(f64, Vec<usize>)> {
    if set.is_empty() {
        return Err(Error::EmptyInput);
    }
    let idx: Vec<usize> = (0..set.len()).collect();
    let mut loss_sum = 0.0;
    let mut preds = Vec::with_capacity(set.len());
    for chunk in idx.chunks(micro_batch.max(1)) {
        let (x, labels) = set.batch::<T>(chunk)?;
        let mut g = Graph::inference();
        let xv = model.input(&mut g, &x)?;
        let logits = model.forward(&mut g, xv)?;
        let loss = g.cross_entropy(logits, &labels)?;
        loss_sum += g.value(loss).data()[0].to_f64_lossy() * chunk.len() as f64;
        preds.extend(argmax_rows(
            g.value(logits).data(),
            model.config.num_classes,
        ));
    }
    Ok((loss_sum / set.len() as f64, preds))
}

/// Metrics of `model` on `set` (argmax of the logits, dropout off).
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    set: &SegmentSet,
    micro_batch: usize,
) -> Result<Metrics> {
    let (_, preds) = predict(model, set, micro_batch)?;
    let actual: Vec<usize> = set.labels().iter().map(|&l| usize::from(l)).collect();
    Ok(Metrics::from_predictions(&preds, &actual))
}

fn check_shapes<T: Scalar>(model: &Model<T>, splits: &SplitSet) -> Result<()> {
    let cfg = &model.config;
    for (name, s) in [
        ("train", &splits.train),
        ("val", &splits.val),
        ("test", &splits.test),
    ] {
        if s.is_empty() {
            return Err(Error::config("splits", format!("{name} split is empty")));
        }
        if s.channels() != cfg.input_channels || s.segment_len() != cfg.input_len {
            return Err(Error::config(
                "model",
                format!(
                    "model expects {}x{} segments, {name} split holds {}x{}",
                    cfg.input_channels,
                    cfg.input_len,
                    s.channels(),
                    s.segment_len()
                ),
            ));
        }
    }
    Ok(())
}

/// Train on `splits.train`, select by validation loss, and leave the best
/// epoch's weights in `model`. `on_epoch` sees every finished epoch.
pub fn train_with<T: Scalar>(
    model: &mut Model<T>,
    splits: &SplitSet,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<History> {
    cfg.validate()?;
    check_shapes(model, splits)?;
    let mut adam = Adam::new(&cfg.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..splits.train.len()).collect();
    let mut history = History::default();
    let mut best: Option<(f64, Vec<Vec<T>>)> = None;
    let mut since_best = 0;
    let mut dropout_seed = cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);

    for epoch in 0..cfg.max_epochs {
        let lr = lr_at_epoch(&cfg.optimizer, epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            model.store.zero_grads();
            for chunk in batch.chunks(cfg.micro_batch) {
                dropout_seed = dropout_seed.wrapping_add(1);
                let (x, labels) = splits.train.batch::<T>(chunk)?;
                let mut g = Graph::new(true, dropout_seed);
                let xv = model.input(&mut g, &x)?;
                let logits = model.forward(&mut g, xv)?;
                let loss = g.cross_entropy(logits, &labels).map_err(|e| match e {
                    Error::NonFinite(m) => {
                        Error::NonFinite(format!("epoch {epoch}, batch {b}: {m}"))
                    }
                    other => other,
                })?;
                loss_sum += g.value(loss).data()[0].to_f64_lossy() * chunk.len() as f64;
                g.backward(loss)?;
                let share = T::from_f64_lossy(chunk.len() as f64 / batch.len() as f64);
                g.accumulate_param_grads(&mut model.store, share);
            }
            adam.step(&mut model.store, lr).map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("epoch {epoch}, batch {b}: {m}")),
                other => other,
            })?;
        }
        let (val_loss, preds) = predict(model, &splits.val, cfg.micro_batch)?;
        let correct = preds
            .iter()
            .zip(splits.val.labels())
            .filter(|(p, l)| **p == usize::from(**l))
            .count();
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / splits.train.len() as f64,
            val_loss,
            val_accuracy: correct as f64 / splits.val.len() as f64,
            lr,
        };
        history.epochs.push(rec);
        on_epoch(&rec);

        if best
            .as_ref()
            .is_none_or(|(l, _)| val_loss < *l - cfg.min_delta)
        {
            best = Some((
                val_loss,
                model
                    .store
                    .iter()
                    .map(|p| p.tensor.data().to_vec())
                    .collect(),
            ));
            history.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.early_stop_patience {
                history.stopped_early = true;
                break;
            }
        }
    }
    if let Some((_, weights)) = best {
        for (p, w) in model.store.iter_mut().zip(weights) {
            p.tensor.data_mut().copy_from_slice(&w);
        }
    }
    Ok(history)
}

pub fn train<T: Scalar>(
    model: &mut Model<T>,
    splits: &SplitSet,
    cfg: &TrainConfig,
) -> Result<History> {
    train_with(model, splits, cfg, |_| {})
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_three_f1() {
        let f1 = f1_score(0.9581, 0.9682).unwrap();
        assert!((f1 - 0.9631).abs() < 5e-4, "{f1}");
    }

    #[test]
    fn perfect_and_degenerate() {
        let m = Metrics::from_predictions(&[1, 0, 1, 0], &[1, 0, 1, 0]);
        assert_eq!(
            (m.accuracy, m.precision, m.recall, m.f1),
            (1.0, 1.0, 1.0, 1.0)
        );
        assert!(!m.degenerate);
        let m = Metrics::from_predictions(&[0, 0, 0, 0], &[1, 0, 1, 0]);
        assert_eq!(m.accuracy, 0.5);
        assert_eq!(m.recall, 0.0);
        assert!(m.degenerate);
        let m = Metrics::from_predictions(&[1, 1, 1, 1], &[1, 0, 1, 0]);
        assert_eq!((m.accuracy, m.recall, m.precision), (0.5, 1.0, 0.5));
    }

    #[test]
    fn patience_bounds() {
        let mut c = TrainConfig {
            early_stop_patience: 0,
            ..TrainConfig::default()
        };
        assert!(
            matches!(c.validate(), Err(Error::Config { field, .. }) if field == "early_stop_patience")
        );
        c.early_stop_patience = 301;
        assert!(c.validate().is_err());
    }

    #[test]
    fn argmax_prefers_first() {
        assert_eq!(argmax_rows(&[0.5f64, 0.5, 0.1, 0.9], 2), vec![0, 1]);
    }
}
