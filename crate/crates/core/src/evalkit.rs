//! Splits, metrics and evaluation reports.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::abstraction::Sample;
use crate::error::{Error, Result};
use crate::models::{ho_predict, predict_cell, predict_probs, train_epoch, Model};
use crate::numcore::{loss, AdamState, Tensor};
use crate::rng::{self, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitUnit {
    Sample,
    User,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    /// train : val : test
    pub ratios: [f64; 3],
    pub unit: SplitUnit,
    pub seed: u64,
}

impl SplitSpec {
    pub fn four_one_one(unit: SplitUnit, seed: u64) -> Self {
        Self { ratios: [4.0, 1.0, 1.0], unit, seed }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Split {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Part sizes for `n` items: floor for val and test, remainder to train.
pub fn split_counts(n: usize, ratios: [f64; 3]) -> Result<[usize; 3]> {
    if ratios.iter().any(|r| !(*r > 0.0) || !r.is_finite()) {
        return Err(Error::invalid(format!("split ratios must be positive, got {ratios:?}")));
    }
    let total: f64 = ratios.iter().sum();
    let val = (n as f64 * ratios[1] / total).floor() as usize;
    let test = (n as f64 * ratios[2] / total).floor() as usize;
    let counts = [n - val - test, val, test];
    if counts.contains(&0) {
        return Err(Error::InsufficientData(format!(
            "split of {n} gives empty part (train/val/test = {}/{}/{})",
            counts[0], counts[1], counts[2]
        )));
    }
    Ok(counts)
}

/// Seeded shuffle then contiguous cut: val, then test, then train.
pub fn split_dataset(samples: &[Sample], spec: &SplitSpec) -> Result<Split> {
    let mut r = rng::stream(spec.seed, &[tag::SPLIT]);
    match spec.unit {
        SplitUnit::Sample => {
            let [_, nv, nt] = split_counts(samples.len(), spec.ratios)?;
            let mut idx: Vec<usize> = (0..samples.len()).collect();
            idx.shuffle(&mut r);
            let pick = |range: &[usize]| range.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>();
            Ok(Split { val: pick(&idx[..nv]), test: pick(&idx[nv..nv + nt]), train: pick(&idx[nv + nt..]) })
        }
        SplitUnit::User => {
            let mut users: Vec<&str> =
                samples.iter().map(|s| s.user_id.as_str()).collect::<BTreeSet<_>>().into_iter().collect();
            let [_, nv, nt] = split_counts(users.len(), spec.ratios)?;
            users.shuffle(&mut r);
            let val: BTreeSet<&str> = users[..nv].iter().copied().collect();
            let test: BTreeSet<&str> = users[nv..nv + nt].iter().copied().collect();
            let mut out = Split::default();
            for s in samples {
                let u = s.user_id.as_str();
                let part = if val.contains(u) {
                    &mut out.val
                } else if test.contains(u) {
                    &mut out.test
                } else {
                    &mut out.train
                };
                part.push(s.clone());
            }
            Ok(out)
        }
    }
}

pub fn categorical_accuracy(truth: &[usize], predicted: &[usize]) -> Result<f64> {
    if truth.len() != predicted.len() {
        return Err(Error::shape("accuracy inputs", &[truth.len()], &[predicted.len()]));
    }
    if truth.is_empty() {
        return Err(Error::InsufficientData("accuracy of an empty set".into()));
    }
    Ok(truth.iter().zip(predicted).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64)
}

fn check_labels(labels: &[usize], n_classes: usize) -> Result<()> {
    match labels.iter().find(|&&l| l >= n_classes) {
        Some(l) => Err(Error::invalid(format!("label {l} outside [0, {n_classes})"))),
        None => Ok(()),
    }
}

/// Per-class true-label counts.
pub fn supports(truth: &[usize], n_classes: usize) -> Result<Vec<usize>> {
    check_labels(truth, n_classes)?;
    let mut s = vec![0; n_classes];
    for &t in truth {
        s[t] += 1;
    }
    Ok(s)
}

/// Per-class F1 (0 when precision + recall is 0), in class order.
pub fn per_class_f1(truth: &[usize], predicted: &[usize], n_classes: usize) -> Result<Vec<f64>> {
    if truth.len() != predicted.len() {
        return Err(Error::shape("f1 inputs", &[truth.len()], &[predicted.len()]));
    }
    check_labels(truth, n_classes)?;
    check_labels(predicted, n_classes)?;
    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let mut fneg = vec![0usize; n_classes];
    for (&t, &p) in truth.iter().zip(predicted) {
        if t == p {
            tp[t] += 1;
        } else {
            fp[p] += 1;
            fneg[t] += 1;
        }
    }
    Ok((0..n_classes)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fneg[c];
            if tp[c] == 0 || denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .collect())
}

/// Support-weighted mean of per-class F1; classes absent from the truth
/// contribute nothing.
pub fn weighted_f1(truth: &[usize], predicted: &[usize], n_classes: usize) -> Result<f64> {
    if truth.is_empty() {
        return Err(Error::InsufficientData("F1 of an empty set".into()));
    }
    let f1 = per_class_f1(truth, predicted, n_classes)?;
    let sup = supports(truth, n_classes)?;
    Ok(f1.iter().zip(&sup).map(|(f, &s)| f * s as f64).sum::<f64>() / truth.len() as f64)
}

pub fn macro_f1(truth: &[usize], predicted: &[usize], n_classes: usize) -> Result<f64> {
    let f1 = per_class_f1(truth, predicted, n_classes)?;
    let sup = supports(truth, n_classes)?;
    let present: Vec<f64> = f1.iter().zip(&sup).filter(|(_, &s)| s > 0).map(|(f, _)| *f).collect();
    if present.is_empty() {
        return Err(Error::InsufficientData("F1 of an empty set".into()));
    }
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

/// Output of a predictor over a sample set.
#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    Probabilities(Tensor),
    Labels(Vec<usize>),
}

impl Prediction {
    pub fn labels(&self) -> Vec<usize> {
        match self {
            Prediction::Labels(l) => l.clone(),
            Prediction::Probabilities(p) => (0..p.dim(0))
                .map(|i| {
                    let row = p.row(i);
                    let mut best = 0;
                    for (j, &v) in row.iter().enumerate() {
                        if v > row[best] {
                            best = j;
                        }
                    }
                    best
                })
                .collect(),
        }
    }
}

pub trait Predictor {
    fn name(&self) -> String;
    fn n_classes(&self) -> usize;
    fn predict(&self, samples: &[Sample]) -> Result<Prediction>;
}

impl Predictor for Model {
    fn name(&self) -> String {
        self.arch.variant.to_string()
    }

    fn n_classes(&self) -> usize {
        Model::n_classes(self)
    }

    fn predict(&self, samples: &[Sample]) -> Result<Prediction> {
        Ok(Prediction::Probabilities(predict_probs(self, samples)?))
    }
}

/// Historic-occupancy baseline over a sample set; ties are broken by one
/// seeded stream consumed in sample order.
#[derive(Debug, Clone, Copy)]
pub struct HoPredictor {
    pub m: usize,
    pub seed: u64,
}

impl Predictor for HoPredictor {
    fn name(&self) -> String {
        "ho".into()
    }

    fn n_classes(&self) -> usize {
        self.m * self.m
    }

    fn predict(&self, samples: &[Sample]) -> Result<Prediction> {
        let mut r = rng::stream(self.seed, &[tag::HO]);
        samples
            .iter()
            .map(|s| {
                if s.region.m != self.m {
                    return Err(Error::shape("HO region", &[s.region.m], &[self.m]));
                }
                Ok(ho_predict(&s.region, &mut r))
            })
            .collect::<Result<_>>()
            .map(Prediction::Labels)
    }
}

mod na_float {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) => s.serialize_f64(*x),
            None => s.serialize_str("NA"),
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        match Raw::deserialize(d)? {
            Raw::Num(x) => Ok(Some(x)),
            Raw::Text(t) if t == "NA" => Ok(None),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("expected number or NA, got '{t}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub predictor: String,
    pub n_samples: usize,
    /// Not applicable for predictors without probabilities.
    #[serde(with = "na_float")]
    pub loss: Option<f64>,
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub out_of_region: usize,
    pub support: Vec<usize>,
}

impl MetricsReport {
    pub fn loss_text(&self) -> String {
        self.loss.map_or_else(|| "NA".into(), |l| format!("{l:.4}"))
    }
}

/// Per-sample truth, prediction and (for probabilistic predictors) the
/// probability rows, for offline recomputation.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionDump {
    pub truth: Vec<usize>,
    pub predicted: Vec<usize>,
    pub probs: Option<Tensor>,
}

pub fn evaluate_with_dump(predictor: &dyn Predictor, samples: &[Sample]) -> Result<(MetricsReport, PredictionDump)> {
    if samples.is_empty() {
        return Err(Error::InsufficientData("evaluation set is empty".into()));
    }
    let n = predictor.n_classes();
    let truth: Vec<usize> = samples.iter().map(|s| s.label.class_index).collect();
    let pred = predictor.predict(samples)?;
    let predicted = pred.labels();
    let (loss, probs) = match pred {
        Prediction::Probabilities(p) => (Some(loss::cross_entropy_labels(&truth, &p)?), Some(p)),
        Prediction::Labels(_) => (None, None),
    };
    let report = MetricsReport {
        predictor: predictor.name(),
        n_samples: samples.len(),
        loss,
        accuracy: categorical_accuracy(&truth, &predicted)?,
        weighted_f1: weighted_f1(&truth, &predicted, n)?,
        out_of_region: 0,
        support: supports(&truth, n)?,
    };
    Ok((report, PredictionDump { truth, predicted, probs }))
}

/// Inference-mode metrics of `predictor` on `samples`.
pub fn evaluate_model(predictor: &dyn Predictor, samples: &[Sample]) -> Result<MetricsReport> {
    Ok(evaluate_with_dump(predictor, samples)?.0)
}

const COLUMNS: [&str; 6] = ["model", "n_samples", "loss", "accuracy", "weighted_f1", "out_of_region"];

fn row(r: &MetricsReport) -> [String; 6] {
    [
        r.predictor.clone(),
        r.n_samples.to_string(),
        r.loss_text(),
        format!("{:.4}", r.accuracy),
        format!("{:.4}", r.weighted_f1),
        r.out_of_region.to_string(),
    ]
}

/// Aligned plain-text comparison table.
pub fn comparison_table(reports: &[MetricsReport]) -> String {
    let rows: Vec<[String; 6]> = reports.iter().map(row).collect();
    let mut widths = COLUMNS.map(str::len);
    for r in &rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let mut line = |cells: Vec<&str>| {
        let parts: Vec<String> = cells.iter().zip(widths).map(|(c, w)| format!("{c:<w$}")).collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(COLUMNS.to_vec());
    for r in &rows {
        line(r.iter().map(String::as_str).collect());
    }
    out
}

pub fn comparison_csv(reports: &[MetricsReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(COLUMNS).map_err(|e| Error::Format(e.to_string()))?;
    for r in reports {
        w.write_record(row(r)).map_err(|e| Error::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

pub const DEFAULT_BENCH_PREDICTIONS: usize = 100;
pub const BENCH_WARMUP: usize = 5;
const BENCH_TRAIN_REPEATS: usize = 3;

/// Wall-time summary in milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub n: usize,
    pub mean_ms: f64,
    pub sd_ms: f64,
    pub p95_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
}

impl LatencyStats {
    pub fn from_ms(times: &[f64]) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::InsufficientData("no timings".into()));
        }
        let n = times.len() as f64;
        let mean = times.iter().sum::<f64>() / n;
        let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n;
        let mut sorted = times.to_vec();
        sorted.sort_by(f64::total_cmp);
        let rank = ((0.95 * n).ceil() as usize).clamp(1, sorted.len());
        Ok(Self {
            n: times.len(),
            mean_ms: mean,
            sd_ms: var.sqrt(),
            p95_ms: sorted[rank - 1],
            min_ms: sorted[0],
            max_ms: sorted[sorted.len() - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub model: String,
    pub warmup: usize,
    /// Single-sample inference.
    pub prediction: LatencyStats,
    pub train_batch_size: usize,
    /// One training epoch over a fixed batch.
    pub train_epoch: LatencyStats,
}

/// Times `n` single-sample predictions (cycling through `samples`) after
/// [`BENCH_WARMUP`] untimed ones, plus a few training epochs on the first
/// `batch_size` samples.
pub fn bench(model: &Model, samples: &[Sample], n: usize, batch_size: usize) -> Result<BenchReport> {
    if n == 0 || batch_size == 0 {
        return Err(Error::invalid("bench needs at least one prediction and a batch size of at least 1"));
    }
    if samples.is_empty() {
        return Err(Error::InsufficientData("bench needs at least one sample".into()));
    }
    let mut times = Vec::with_capacity(n);
    for i in 0..BENCH_WARMUP + n {
        let s = &samples[i % samples.len()];
        let t = Instant::now();
        std::hint::black_box(predict_cell(model, &s.sequence, &s.region)?);
        if i >= BENCH_WARMUP {
            times.push(t.elapsed().as_secs_f64() * 1e3);
        }
    }
    let batch = &samples[..batch_size.min(samples.len())];
    let mut local = model.clone();
    let mut adam = AdamState::new(&local.params, 1e-3);
    let mut epochs = Vec::with_capacity(BENCH_TRAIN_REPEATS);
    for e in 0..=BENCH_TRAIN_REPEATS {
        let t = Instant::now();
        let seed = local.arch.seed;
        train_epoch(&mut local, &mut adam, batch, batch.len(), seed, e as u64)?;
        if e > 0 {
            epochs.push(t.elapsed().as_secs_f64() * 1e3);
        }
    }
    Ok(BenchReport {
        model: model.arch.variant.to_string(),
        warmup: BENCH_WARMUP,
        prediction: LatencyStats::from_ms(&times)?,
        train_batch_size: batch.len(),
        train_epoch: LatencyStats::from_ms(&epochs)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_counts_remainder_to_train() {
        assert_eq!(split_counts(600, [4.0, 1.0, 1.0]).unwrap(), [400, 100, 100]);
        assert_eq!(split_counts(601, [4.0, 1.0, 1.0]).unwrap(), [401, 100, 100]);
        assert!(matches!(split_counts(5, [4.0, 1.0, 1.0]), Err(Error::InsufficientData(_))));
        assert!(split_counts(60, [4.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn accuracy_cases() {
        assert_eq!(categorical_accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(categorical_accuracy(&[1, 2], &[0, 0]).unwrap(), 0.0);
        assert_eq!(categorical_accuracy(&[1, 2, 3, 4], &[1, 2, 3, 0]).unwrap(), 0.75);
        assert!(categorical_accuracy(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn weighted_f1_hand_case() {
        let f = weighted_f1(&[0, 0, 0, 1], &[0, 0, 1, 1], 2).unwrap();
        assert!((f - 0.766_666_666_666_666_7).abs() <= 1e-9, "{f}");
        assert_eq!(weighted_f1(&[3, 3], &[3, 3], 5).unwrap(), 1.0);
        assert_eq!(weighted_f1(&[0, 1], &[2, 2], 3).unwrap(), 0.0);
        assert!(weighted_f1(&[0, 5], &[0, 0], 3).is_err());
    }

    #[test]
    fn na_loss_serialization() {
        let r = MetricsReport {
            predictor: "ho".into(),
            n_samples: 1,
            loss: None,
            accuracy: 1.0,
            weighted_f1: 1.0,
            out_of_region: 0,
            support: vec![1],
        };
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"loss\":\"NA\""), "{json}");
        assert_eq!(serde_json::from_str::<MetricsReport>(&json).unwrap(), r);
        let t = comparison_table(std::slice::from_ref(&r));
        assert!(t.lines().nth(1).unwrap().contains("NA"));
        assert!(comparison_csv(&[r]).unwrap().lines().nth(1).unwrap().starts_with("ho,1,NA,"));
    }

    #[test]
    fn latency_stats() {
        let s = LatencyStats::from_ms(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!((s.mean_ms, s.min_ms, s.max_ms, s.p95_ms), (2.5, 1.0, 4.0, 4.0));
        assert!((s.sd_ms - 1.25f64.sqrt()).abs() < 1e-15);
        let many: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(LatencyStats::from_ms(&many).unwrap().p95_ms, 95.0);
        assert!(LatencyStats::from_ms(&[]).is_err());
    }
}
