mod common;

use common::random_samples;
use locpred::models::{
    fit, ho_predict, max_cells, predict_cell, ArchConfig, ForwardCtx, Model, ModelLossTarget, NormMode, TrainConfig,
    Variant,
};
use locpred::numcore::gradcheck::{grad_check, FD_STEP};
use locpred::numcore::Tensor;
use locpred::rng;
use rand::Rng as _;

const VARIANTS: [Variant; 3] = [Variant::Fglp, Variant::BilstmOnly, Variant::CnnOnly];

fn tiny(variant: Variant, seed: u64) -> ArchConfig {
    ArchConfig {
        variant,
        lstm_hidden: 4,
        cnn_filters: vec![2, 3],
        dense_sizes: vec![6],
        dropout: 0.2,
        recurrent_dropout: 0.2,
        m: 4,
        k: 3,
        seed,
    }
}

#[test]
fn tiny_variants_pass_gradient_check() {
    for v in VARIANTS {
        for seed in 0..3 {
            let model = Model::build(&tiny(v, seed)).unwrap();
            let samples = random_samples(3, 3, 4, 100 + seed);
            let batch = model.batch(&samples).unwrap();
            let masks = model.draw_masks(3, &mut rng::stream(seed, &[1])).unwrap();
            let target = ModelLossTarget { model: &model, labels: batch.labels.clone(), masks: Some(masks), norm: NormMode::Batch };
            let rep = grad_check(&target, &target.tensors(&batch), FD_STEP).unwrap();
            assert!(rep.max_rel_error <= 1e-4, "{v:?} seed {seed}: {rep:?}");
        }
    }
}

#[test]
fn fglp_output_shape_and_concat_width() {
    let arch = ArchConfig::desk(Variant::Fglp, 10, 8, 1);
    assert_eq!(arch.lstm_width() + arch.cnn_width(), 32 + 64);
    let model = Model::build(&arch).unwrap();
    let b = model.batch(&random_samples(3, 8, 10, 2)).unwrap();
    assert_eq!(model.predict_batch(&b).unwrap().shape(), &[3, 100]);
    assert_eq!(model.params.by_name("dense0.w").unwrap().shape(), &[96, 64]);
}

#[test]
fn same_seed_builds_identical_parameters() {
    for v in VARIANTS {
        let a = Model::build(&ArchConfig::desk(v, 10, 8, 42)).unwrap();
        let b = Model::build(&ArchConfig::desk(v, 10, 8, 42)).unwrap();
        assert_eq!(a.params, b.params);
        let c = Model::build(&ArchConfig::desk(v, 10, 8, 43)).unwrap();
        assert_ne!(a.params, c.params);
    }
}

#[test]
fn single_branch_variants_ignore_the_other_input() {
    let samples = random_samples(4, 8, 10, 3);
    for v in [Variant::BilstmOnly, Variant::CnnOnly] {
        let model = Model::build(&ArchConfig::desk(v, 10, 8, 5)).unwrap();
        let b = model.batch(&samples).unwrap();
        let base = model.predict_batch(&b).unwrap();
        let mut p = b.clone();
        if v == Variant::BilstmOnly {
            p.region = p.region.map(|x| 3.0 - x);
        } else {
            p.seq = p.seq.map(|x| -x * 0.5);
        }
        assert_eq!(model.predict_batch(&p).unwrap(), base, "{v:?}");
    }
    let model = Model::build(&ArchConfig::desk(Variant::Fglp, 10, 8, 5)).unwrap();
    let b = model.batch(&samples).unwrap();
    let mut p = b.clone();
    p.region = p.region.map(|x| 3.0 - x);
    assert_ne!(model.predict_batch(&p).unwrap(), model.predict_batch(&b).unwrap());
}

#[test]
fn fresh_model_is_near_uniform() {
    for v in VARIANTS {
        let model = Model::build(&ArchConfig::desk(v, 10, 8, 9)).unwrap();
        let probs = model.predict_batch(&model.batch(&random_samples(16, 8, 10, 4)).unwrap()).unwrap();
        for i in 0..16 {
            let row = probs.row(i);
            let max = row.iter().cloned().fold(0.0, f64::max);
            let min = row.iter().cloned().fold(1.0, f64::min);
            assert!(max / min < 10.0, "{v:?} row {i}: ratio {}", max / min);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn infer_is_repeatable_and_train_without_dropout_matches_infer() {
    let mut arch = ArchConfig::desk(Variant::Fglp, 10, 8, 6);
    arch.dropout = 0.0;
    arch.recurrent_dropout = 0.0;
    let model = Model::build(&arch).unwrap();
    let b = model.batch(&random_samples(5, 8, 10, 7)).unwrap();
    let a1 = model.predict_batch(&b).unwrap();
    assert_eq!(a1, model.predict_batch(&b).unwrap());
    let masks = model.draw_masks(5, &mut rng::stream(0, &[])).unwrap();
    let frozen = ForwardCtx { norm: NormMode::Running, masks: Some(&masks) };
    assert_eq!(model.forward(&b.seq, &b.region, frozen).unwrap().probs, a1);
}

#[test]
fn zero_epochs_leave_parameters_unchanged() {
    let mut model = Model::build(&ArchConfig::desk(Variant::Fglp, 10, 8, 1)).unwrap();
    let before = model.params.clone();
    let s = random_samples(10, 8, 10, 1);
    let cfg = TrainConfig { max_epochs: 0, ..TrainConfig::desk(1) };
    let h = fit(&mut model, &s, &s, &cfg).unwrap();
    assert!(h.epochs.is_empty());
    assert_eq!(model.params, before);
    assert!(fit(&mut model, &[], &s, &TrainConfig::desk(1)).is_err());
}

#[test]
fn fit_restores_the_best_epoch() {
    let train = random_samples(40, 8, 10, 11);
    let val = random_samples(20, 8, 10, 12);
    let mut model = Model::build(&ArchConfig::desk(Variant::Fglp, 10, 8, 2)).unwrap();
    let cfg = TrainConfig { batch_size: 8, max_epochs: 12, patience: 3, lr: 1e-2, seed: 3 };
    let h = fit(&mut model, &train, &val, &cfg).unwrap();
    let best = h.best().unwrap();
    let max = h.epochs.iter().map(|e| e.val_acc).fold(0.0, f64::max);
    assert_eq!(best.val_acc, max);
    let (_, acc) = locpred::models::evaluate_loss_acc(&model, &val).unwrap();
    assert!(acc >= best.val_acc - 1e-12, "restored {acc} vs best {}", best.val_acc);
}

#[test]
fn fit_is_deterministic() {
    let s = random_samples(30, 8, 10, 13);
    let run = || {
        let mut m = Model::build(&ArchConfig::desk(Variant::Fglp, 10, 8, 2)).unwrap();
        let h = fit(&mut m, &s, &s, &TrainConfig { max_epochs: 3, ..TrainConfig::desk(4) }).unwrap();
        (m.params, h)
    };
    assert_eq!(run(), run());
}

#[test]
fn overfit_one_sample_predicts_its_label() {
    let s = random_samples(1, 8, 10, 21);
    let mut model = Model::build(&ArchConfig::desk(Variant::Fglp, 10, 8, 3)).unwrap();
    let cfg = TrainConfig { batch_size: 1, max_epochs: 150, patience: 150, lr: 1e-2, seed: 1 };
    fit(&mut model, &s, &s, &cfg).unwrap();
    let (cell, probs) = predict_cell(&model, &s[0].sequence, &s[0].region).unwrap();
    assert_eq!(cell, s[0].label.class_index);
    let argmax = (0..probs.len()).max_by(|&a, &b| probs[a].total_cmp(&probs[b])).unwrap();
    assert_eq!(cell, argmax);
    assert_eq!(predict_cell(&model, &s[0].sequence, &s[0].region).unwrap(), (cell, probs));
}

#[test]
fn checkpoint_round_trip() {
    let model = Model::build(&ArchConfig::desk(Variant::CnnOnly, 10, 8, 8)).unwrap();
    let mut buf = Vec::new();
    model.save(&mut buf).unwrap();
    let back = Model::load(buf.as_slice()).unwrap();
    assert_eq!(back.arch, model.arch);
    assert_eq!(back.params, model.params);
}

#[test]
fn ho_matches_brute_force_argmax_sets() {
    let mut r = rng::stream(77, &[]);
    for _ in 0..2000 {
        let m = r.random_range(1..6);
        let values: Vec<f64> = (0..m * m).map(|_| r.random_range(0..4) as f64).collect();
        let mut best = f64::NEG_INFINITY;
        let mut set = Vec::new();
        for (i, &v) in values.iter().enumerate() {
            if v > best {
                best = v;
                set = vec![i];
            } else if v == best {
                set.push(i);
            }
        }
        assert_eq!(max_cells(&values), set);
        let region = locpred::abstraction::RegionOccupancy { m, values };
        assert!(set.contains(&ho_predict(&region, &mut r)));
    }
}

#[test]
fn shape_mismatch_is_reported() {
    let model = Model::build(&ArchConfig::desk(Variant::Fglp, 10, 8, 0)).unwrap();
    assert!(model.batch(&random_samples(2, 5, 10, 0)).is_err());
    let seq = Tensor::zeros(&[2, 8, 2]);
    let region = Tensor::zeros(&[2, 1, 9, 9]);
    assert!(model.forward(&seq, &region, ForwardCtx::INFER).is_err());
}
