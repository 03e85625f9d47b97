//! Mini-batch training with Adam over binary cross-entropy, and evaluation.

use crate::error::{Error, Result};
use crate::model::Model;
use crate::record::DayRecord;
use crate::rng::{self, streams};
use crate::tensor::{Adam, AdamState, Graph};
use chrono::NaiveDate;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Scores at or above this are class 1.
pub const CLASS_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            batch_size: 64,
            epochs: 15,
            seed: 42,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // zero is allowed: it must leave the parameters untouched
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Contract(format!("learning rate {} must be finite and >= 0", self.lr)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Contract("batch_size and epochs must be at least 1".into()));
        }
        Ok(())
    }
}

/// One row of the learning curves. Validation fields are `None` without a
/// validation split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean training-mode loss over the epoch's batches.
    pub train_loss: f64,
    /// Inference-mode accuracy on the training split after the epoch.
    pub train_acc: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Final model, or the last model with a finite loss when aborted.
    pub model: Model,
    pub curves: Vec<EpochStats>,
    /// Set when training stopped on a non-finite loss.
    pub aborted: Option<String>,
}

fn labels(days: &[DayRecord]) -> Result<Vec<f64>> {
    days.iter()
        .map(|d| {
            d.label
                .map(f64::from)
                .ok_or_else(|| Error::Data(format!("{}: record has no label", d.date)))
        })
        .collect()
}

/// Mean BCE and accuracy in inference mode.
pub fn loss_and_accuracy(model: &Model, days: &[DayRecord]) -> Result<(f64, f64)> {
    let y = labels(days)?;
    let p = model.predict(days)?;
    let eps = crate::tensor::BCE_EPSILON;
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (&pi, &yi) in p.iter().zip(&y) {
        let c = pi.clamp(eps, 1.0 - eps);
        loss -= yi * c.ln() + (1.0 - yi) * (1.0 - c).ln();
        correct += usize::from(f64::from(u8::from(pi >= CLASS_THRESHOLD)) == yi);
    }
    Ok((loss / y.len() as f64, correct as f64 / y.len() as f64))
}

/// Trains a copy of `model`. Batches are reshuffled each epoch from
/// the `shuffle` stream of `cfg.seed`; dropout masks come from the `dropout`
/// stream. The final partial batch is kept.
pub fn train(
    model: &Model,
    train_set: &[DayRecord],
    val_set: &[DayRecord],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let y = labels(train_set)?;
    labels(val_set)?;
    let mut model = model.clone();
    let adam = Adam::new(cfg.lr);
    let mut state = AdamState::default();
    let mut shuffle_rng = rng::stream(cfg.seed, streams::SHUFFLE);
    let mut dropout_rng = rng::stream(cfg.seed, streams::DROPOUT);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut curves = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut shuffle_rng);
        }
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let days: Vec<&DayRecord> = batch.iter().map(|&i| &train_set[i]).collect();
            let targets: Vec<f64> = batch.iter().map(|&i| y[i]).collect();
            let mut g = Graph::new();
            let fwd = model.forward(&mut g, &days, Some(&mut dropout_rng))?;
            let loss = g.bce(fwd.preds, &targets)?;
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                let msg = format!("non-finite training loss at epoch {epoch}");
                log::error!("{msg}; keeping the last finite model");
                return Ok(TrainOutcome {
                    model,
                    curves,
                    aborted: Some(msg),
                });
            }
            g.backward(loss)?;
            let grads = model.gradients(&g, &fwd.bound);
            let mut params = model.params.tensors_mut();
            adam.update(&mut params, &grads, &mut state)?;
            model.update_running(&g, &fwd.bn_nodes);
            loss_sum += lv * batch.len() as f64;
        }
        let (_, train_acc) = loss_and_accuracy(&model, train_set)?;
        let (val_loss, val_acc) = if val_set.is_empty() {
            (None, None)
        } else {
            let (l, a) = loss_and_accuracy(&model, val_set)?;
            (Some(l), Some(a))
        };
        let stats = EpochStats {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            train_acc,
            val_loss,
            val_acc,
        };
        log::info!(
            "epoch {epoch}: train loss {:.4} acc {:.4}",
            stats.train_loss,
            stats.train_acc
        );
        curves.push(stats);
    }
    Ok(TrainOutcome {
        model,
        curves,
        aborted: None,
    })
}

/// `epoch,train_loss,train_acc,val_loss,val_acc`; missing values are empty.
pub fn write_curves<W: Write>(curves: &[EpochStats], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["epoch", "train_loss", "train_acc", "val_loss", "val_acc"])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for c in curves {
        wtr.write_record([
            c.epoch.to_string(),
            c.train_loss.to_string(),
            c.train_acc.to_string(),
            opt(c.val_loss),
            opt(c.val_acc),
        ])?;
    }
    wtr.flush().map_err(|e| Error::io("curves csv", e))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl Confusion {
    pub fn add(&mut self, predicted: u8, actual: u8) {
        match (predicted, actual) {
            (1, 1) => self.tp += 1,
            (1, _) => self.fp += 1,
            (_, 1) => self.fn_ += 1,
            _ => self.tn += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> Option<f64> {
        ratio(self.tp + self.tn, self.total())
    }

    pub fn sensitivity(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn specificity(&self) -> Option<f64> {
        ratio(self.tn, self.tn + self.fp)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub date: NaiveDate,
    pub score: f64,
    pub predicted: u8,
    pub label: u8,
}

/// `Date,Score,Predicted,Label`.
pub fn write_predictions<W: Write>(preds: &[Prediction], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["Date", "Score", "Predicted", "Label"])?;
    for p in preds {
        wtr.write_record([
            p.date.to_string(),
            p.score.to_string(),
            p.predicted.to_string(),
            p.label.to_string(),
        ])?;
    }
    wtr.flush().map_err(|e| Error::io("predictions csv", e))
}

/// Metrics are `None` when their denominator is zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub confusion: Confusion,
    pub accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub predictions: Vec<Prediction>,
}

impl EvalReport {
    pub fn from_scores(days: &[DayRecord], scores: &[f64]) -> Result<Self> {
        if days.len() != scores.len() {
            return Err(Error::Alignment(format!(
                "{} scores for {} days",
                scores.len(),
                days.len()
            )));
        }
        let y = labels(days)?;
        let mut confusion = Confusion::default();
        let mut predictions = Vec::with_capacity(days.len());
        for ((d, &s), &l) in days.iter().zip(scores).zip(&y) {
            let predicted = u8::from(s >= CLASS_THRESHOLD);
            let label = l as u8;
            confusion.add(predicted, label);
            predictions.push(Prediction {
                date: d.date,
                score: s,
                predicted,
                label,
            });
        }
        Ok(Self {
            confusion,
            accuracy: confusion.accuracy(),
            sensitivity: confusion.sensitivity(),
            specificity: confusion.specificity(),
            predictions,
        })
    }
}

pub fn evaluate(model: &Model, split: &[DayRecord]) -> Result<EvalReport> {
    if split.is_empty() {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    labels(split)?;
    let scores = model.predict(split)?;
    EvalReport::from_scores(split, &scores)
}

/// Single inference-mode score for one day.
pub fn predict(model: &Model, day: &DayRecord) -> Result<f64> {
    Ok(model.predict(std::slice::from_ref(day))?[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ModelKind};
    use crate::tensor::Tensor;
    use crate::text::{EmbeddingTable, PriceNorm};
    use proptest::prelude::*;

    fn day(i: usize, tokens: Vec<usize>, label: u8) -> DayRecord {
        let date = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap() + chrono::Duration::days(i as i64);
        DayRecord {
            date,
            open: 10.0,
            high: 11.0,
            low: 9.0,
            close: 10.0,
            adj_close: 10.0,
            volume: 1.0,
            tokens,
            covid_flag: false,
            label: Some(label),
        }
    }

    fn tiny(kind: ModelKind, seed: u64) -> Model {
        let cfg = ModelConfig::tiny(kind, 6, 4);
        let table = EmbeddingTable::random(6, 4, seed);
        Model::new(cfg, &table, PriceNorm::default(), seed, true).unwrap()
    }

    fn toy_set() -> Vec<DayRecord> {
        (0..8).map(|i| day(i, vec![1 + i % 2, 3], (i % 2) as u8)).collect()
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let m = tiny(ModelKind::Hybrid, 1);
        let cfg = TrainConfig {
            lr: 0.0,
            epochs: 3,
            batch_size: 3,
            ..Default::default()
        };
        let out = train(&m, &toy_set(), &[], &cfg).unwrap();
        assert_eq!(out.model.params, m.params);
        assert_eq!(out.curves.len(), 3);
        assert!(out.curves.iter().all(|c| c.val_loss.is_none()));
    }

    #[test]
    fn same_seed_same_parameters() {
        let m = tiny(ModelKind::Hybrid, 2);
        let cfg = TrainConfig {
            lr: 0.01,
            epochs: 2,
            batch_size: 3,
            ..Default::default()
        };
        let a = train(&m, &toy_set(), &toy_set(), &cfg).unwrap();
        let b = train(&m, &toy_set(), &toy_set(), &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.curves, b.curves);
        assert_ne!(a.model.params, m.params);
    }

    #[test]
    fn non_finite_loss_aborts_with_last_good_model() {
        let mut m = tiny(ModelKind::CnnLg, 3);
        m.params.insert("out.bias", Tensor::vector(vec![f64::NAN]));
        let cfg = TrainConfig {
            epochs: 2,
            ..Default::default()
        };
        let out = train(&m, &toy_set(), &[], &cfg).unwrap();
        assert!(out.aborted.is_some());
        // NaN breaks PartialEq, so compare the bit patterns
        for ((na, a), (nb, b)) in out.model.params.iter().zip(m.params.iter()) {
            assert_eq!(na, nb);
            let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert!(out.curves.is_empty());
    }

    #[test]
    fn training_rejects_bad_inputs() {
        let m = tiny(ModelKind::CnnLg, 3);
        assert!(train(&m, &[], &[], &TrainConfig::default()).is_err());
        let mut unlabeled = toy_set();
        unlabeled[0].label = None;
        assert!(train(&m, &unlabeled, &[], &TrainConfig::default()).is_err());
        let bad = TrainConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(train(&m, &toy_set(), &[], &bad).is_err());
    }

    #[test]
    fn zero_weight_model_scores_one_half() {
        let mut m = tiny(ModelKind::Hybrid, 4);
        let names: Vec<String> = m.params.names().map(String::from).collect();
        for n in names {
            let t = m.params.get_mut(&n).unwrap();
            t.data_mut().fill(0.0);
        }
        let d = day(0, vec![1, 2], 1);
        assert_eq!(predict(&m, &d).unwrap(), 0.5);
        let r = evaluate(&m, &[d]).unwrap();
        assert_eq!(r.predictions[0].predicted, 1);
    }

    #[test]
    fn metric_examples() {
        let c = Confusion {
            tp: 30,
            fn_: 20,
            tn: 5,
            fp: 5,
        };
        assert!((c.sensitivity().unwrap() - 0.6).abs() < 1e-15);
        let none = Confusion {
            tp: 0,
            fn_: 0,
            tn: 3,
            fp: 0,
        };
        assert_eq!(none.sensitivity(), None);
        assert_eq!(none.specificity(), Some(1.0));
        let days = toy_set();
        let perfect: Vec<f64> = days.iter().map(|d| f64::from(d.label.unwrap())).collect();
        let r = EvalReport::from_scores(&days, &perfect).unwrap();
        assert_eq!((r.accuracy, r.sensitivity, r.specificity), (Some(1.0), Some(1.0), Some(1.0)));
        assert!(evaluate(&tiny(ModelKind::CnnLg, 1), &[]).is_err());
    }

    #[test]
    fn curves_csv_header() {
        let mut buf = Vec::new();
        write_curves(
            &[EpochStats {
                epoch: 1,
                train_loss: 0.5,
                train_acc: 0.75,
                val_loss: None,
                val_acc: None,
            }],
            &mut buf,
        )
        .unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "epoch,train_loss,train_acc,val_loss,val_acc\n1,0.5,0.75,,\n"
        );
    }

    proptest! {
        #[test]
        fn metric_identities(tp in 0u64..500, fp in 0u64..500, tn in 0u64..500, fn_ in 0u64..500) {
            let c = Confusion { tp, fp, tn, fn_ };
            let total = tp + fp + tn + fn_;
            match c.accuracy() {
                Some(a) => prop_assert_eq!(a, (tp + tn) as f64 / total as f64),
                None => prop_assert_eq!(total, 0),
            }
            match c.sensitivity() {
                Some(s) => prop_assert_eq!(s, tp as f64 / (tp + fn_) as f64),
                None => prop_assert_eq!(tp + fn_, 0),
            }
            match c.specificity() {
                Some(s) => prop_assert_eq!(s, tn as f64 / (tn + fp) as f64),
                None => prop_assert_eq!(tn + fp, 0),
            }
        }
    }
}
