mod common;

use std::collections::BTreeSet;

use common::random_samples;
use locpred::abstraction::Sample;
use locpred::error::Result;
use locpred::evalkit::{
    categorical_accuracy, comparison_csv, comparison_table, evaluate_model, evaluate_with_dump, macro_f1, split_dataset,
    weighted_f1, HoPredictor, Prediction, Predictor, SplitSpec, SplitUnit,
};
use locpred::models::{ArchConfig, Model, Variant};
use locpred::numcore::{loss, Tensor};
use proptest::prelude::*;

fn ids(samples: &[Sample]) -> Vec<(String, usize)> {
    samples.iter().map(|s| (s.user_id.clone(), s.label.class_index)).collect()
}

fn tagged(n: usize, users: usize) -> Vec<Sample> {
    let mut s = random_samples(n, 3, 4, 1);
    for (i, x) in s.iter_mut().enumerate() {
        x.user_id = format!("u{:03}", i % users);
        x.horizon = i as u32;
    }
    s
}

#[test]
fn sample_split_is_a_reproducible_partition() {
    let data = tagged(601, 40);
    let spec = SplitSpec::four_one_one(SplitUnit::Sample, 3);
    let a = split_dataset(&data, &spec).unwrap();
    assert_eq!((a.train.len(), a.val.len(), a.test.len()), (401, 100, 100));
    let b = split_dataset(&data, &spec).unwrap();
    assert_eq!(ids(&a.train), ids(&b.train));
    let mut all: Vec<u32> = a.train.iter().chain(&a.val).chain(&a.test).map(|s| s.horizon).collect();
    all.sort_unstable();
    assert_eq!(all, (0..601).collect::<Vec<u32>>());
    let c = split_dataset(&data, &SplitSpec::four_one_one(SplitUnit::Sample, 4)).unwrap();
    assert_ne!(ids(&a.test), ids(&c.test));
}

#[test]
fn user_split_keeps_users_whole() {
    let data = tagged(600, 30);
    let s = split_dataset(&data, &SplitSpec::four_one_one(SplitUnit::User, 9)).unwrap();
    let users = |p: &[Sample]| p.iter().map(|x| x.user_id.clone()).collect::<BTreeSet<_>>();
    let (tr, va, te) = (users(&s.train), users(&s.val), users(&s.test));
    assert_eq!((tr.len(), va.len(), te.len()), (20, 5, 5));
    assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
    assert_eq!(s.train.len() + s.val.len() + s.test.len(), 600);
}

#[test]
fn too_few_units_is_an_error() {
    assert!(split_dataset(&tagged(5, 5), &SplitSpec::four_one_one(SplitUnit::Sample, 0)).is_err());
    assert!(split_dataset(&tagged(100, 3), &SplitSpec::four_one_one(SplitUnit::User, 0)).is_err());
}

#[test]
fn accuracy_and_f1_edge_cases() {
    assert_eq!(categorical_accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
    assert_eq!(categorical_accuracy(&[1, 2, 3], &[0, 0, 0]).unwrap(), 0.0);
    assert!(categorical_accuracy(&[1], &[1, 2]).is_err());
    assert_eq!(weighted_f1(&[0, 1, 2, 2], &[0, 1, 2, 2], 4).unwrap(), 1.0);
    assert_eq!(weighted_f1(&[0, 0, 1], &[3, 3, 3], 4).unwrap(), 0.0);
    assert!(weighted_f1(&[0, 5], &[0, 0], 4).is_err());
}

proptest! {
    #[test]
    fn weighted_equals_macro_on_balanced_supports(
        classes in 2usize..6,
        per in 1usize..6,
        preds in prop::collection::vec(0usize..6, 36),
    ) {
        let truth: Vec<usize> = (0..classes).flat_map(|c| std::iter::repeat_n(c, per)).collect();
        let predicted: Vec<usize> = preds.iter().take(truth.len()).map(|p| p % classes).collect();
        let w = weighted_f1(&truth, &predicted, classes).unwrap();
        let m = macro_f1(&truth, &predicted, classes).unwrap();
        prop_assert!((w - m).abs() < 1e-12, "{} vs {}", w, m);
    }
}

struct Oracle;

impl Predictor for Oracle {
    fn name(&self) -> String {
        "oracle".into()
    }
    fn n_classes(&self) -> usize {
        16
    }
    fn predict(&self, samples: &[Sample]) -> Result<Prediction> {
        let mut data = vec![0.0; samples.len() * 16];
        for (i, s) in samples.iter().enumerate() {
            data[i * 16 + s.label.class_index] = 1.0;
        }
        Ok(Prediction::Probabilities(Tensor::new(vec![samples.len(), 16], data)?))
    }
}

#[test]
fn perfect_oracle_scores_perfectly() {
    let r = evaluate_model(&Oracle, &random_samples(50, 3, 4, 2)).unwrap();
    assert_eq!(r.loss, Some(0.0));
    assert_eq!(r.accuracy, 1.0);
    assert_eq!(r.weighted_f1, 1.0);
    assert_eq!(r.support.iter().sum::<usize>(), 50);
}

#[test]
fn ho_reports_na_loss() {
    let r = evaluate_model(&HoPredictor { m: 4, seed: 1 }, &random_samples(30, 3, 4, 2)).unwrap();
    assert_eq!(r.loss, None);
    assert_eq!(r.loss_text(), "NA");
    assert!(serde_json::to_string(&r).unwrap().contains("\"loss\":\"NA\""));
    assert!(comparison_csv(std::slice::from_ref(&r)).unwrap().contains(",NA,"));
    assert!(comparison_table(&[r]).contains("NA"));
}

#[test]
fn metrics_match_recomputation_from_dump() {
    let arch = ArchConfig::desk(Variant::Fglp, 4, 3, 6);
    let model = Model::build(&ArchConfig { cnn_filters: vec![4, 4], ..arch }).unwrap();
    let samples = random_samples(80, 3, 4, 3);
    let (report, dump) = evaluate_with_dump(&model, &samples).unwrap();
    let probs = dump.probs.unwrap();
    let mut ce = 0.0;
    for (i, &y) in dump.truth.iter().enumerate() {
        ce -= probs.row(i)[y].max(1e-12).ln();
    }
    ce /= dump.truth.len() as f64;
    assert!((report.loss.unwrap() - ce).abs() <= 1e-12);
    assert!((report.loss.unwrap() - loss::cross_entropy_labels(&dump.truth, &probs).unwrap()).abs() <= 1e-12);
    let acc = dump.truth.iter().zip(&dump.predicted).filter(|(a, b)| a == b).count() as f64 / 80.0;
    assert_eq!(report.accuracy, acc);
    assert_eq!(report.weighted_f1, weighted_f1(&dump.truth, &dump.predicted, 16).unwrap());
}

#[test]
fn empty_evaluation_set_is_an_error() {
    assert!(evaluate_model(&Oracle, &[]).is_err());
}
