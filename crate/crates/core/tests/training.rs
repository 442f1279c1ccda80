//! Trainer behaviour: zero steps, selection, shrinkage, determinism, grid search.

mod common;

use common::*;
use nametune::classify::{predict, tuned_head, zero_shot_head};
use nametune::encoder::FrozenDualEncoder;
use nametune::protocol::{evaluate, DatasetSplit, Item};
use nametune::rng::SeededRng;
use nametune::textparams::Method;
use nametune::train::{
    grid_search, initial_parameters, train_run, CheckpointHistory, CheckpointPolicy, EpochRecord, Example,
    OptimizerKind, TrainConfig, TrainGrid,
};

fn examples(items: &[Item]) -> Vec<Example> {
    items.iter().map(|i| Example::new(i.embedding.clone(), i.label)).collect()
}

fn toy_parts() -> (ToyFixture, Vec<Example>, Vec<Example>, Vec<Example>) {
    let fx = bundled_toy();
    let (train, val, test) = match &fx.split {
        DatasetSplit::Traditional { train, val, test } => (examples(train), examples(val), examples(test)),
        _ => unreachable!("bundled toy data is traditional"),
    };
    (fx, train, val, test)
}

fn offset_norm(p: &nametune::textparams::TextParameterSet) -> f64 {
    p.offsets()
        .unwrap()
        .iter()
        .flat_map(|e| e.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

#[test]
fn zero_learning_rate_keeps_the_initialization() {
    let (fx, train, _, _) = toy_parts();
    for method in METHODS {
        let mut cfg = TrainConfig::defaults(method);
        cfg.epochs = 1;
        cfg.learning_rate = 0.0;
        cfg.checkpoint_policy = CheckpointPolicy::FinalEpoch;
        if method == Method::Cona {
            cfg.l_context = 2;
        }
        let out = train_run(&train, None, &cfg, &fx.enc, &fx.classes).unwrap();
        assert_eq!(out.final_params, initial_parameters(&cfg, &fx.enc, &fx.classes).unwrap());
        assert_eq!(out.final_params, out.initial);
    }
}

#[test]
fn increasing_validation_selects_the_last_epoch() {
    let fx = bundled_toy();
    let cfg = TrainConfig::defaults(Method::NameTuning);
    let p = initial_parameters(&cfg, &fx.enc, &fx.classes).unwrap();
    let history = CheckpointHistory {
        epochs: (1..=5)
            .map(|e| EpochRecord {
                epoch: e,
                train_loss: 1.0 / e as f64,
                val_accuracy: Some(0.1 * e as f64),
                params: p.clone(),
            })
            .collect(),
    };
    assert_eq!(history.select(CheckpointPolicy::BestValidation).unwrap(), 4);
    assert_eq!(history.select(CheckpointPolicy::FinalEpoch).unwrap(), 4);
}

#[test]
fn huge_alpha_shrinks_offsets_to_zero_shot() {
    let enc = linear();
    let classes = toy_classes(&enc, 5);
    let mut rng = SeededRng::new(21);
    let d = enc.space().d_embed;
    let train = random_batch(&mut rng, 25, d, 5);
    let queries = random_batch(&mut rng, 50, d, 5);
    let mut cfg = TrainConfig::defaults(Method::NameTuning);
    cfg.alpha = 1e6;
    cfg.epochs = 20;
    cfg.learning_rate = 1e-5;
    cfg.checkpoint_policy = CheckpointPolicy::FinalEpoch;
    let out = train_run(&train, None, &cfg, &enc, &classes).unwrap();
    assert!(offset_norm(&out.selected) < 1e-3, "{}", offset_norm(&out.selected));
    let tuned = tuned_head(&enc, &out.selected, &classes).unwrap();
    let zs = zero_shot_head(&enc, &prompt(&enc), &classes).unwrap();
    for q in &queries {
        assert_eq!(predict(q.embedding.view(), &tuned).unwrap(), predict(q.embedding.view(), &zs).unwrap());
    }
}

#[test]
fn training_reduces_the_loss_for_every_method() {
    let (fx, train, _, _) = toy_parts();
    for method in METHODS {
        let mut cfg = TrainConfig::defaults(method);
        cfg.epochs = 5;
        cfg.checkpoint_policy = CheckpointPolicy::FinalEpoch;
        cfg.learning_rate = if cfg.optimizer == OptimizerKind::Sgd { 2e-3 } else { 4e-3 };
        let out = train_run(&train, None, &cfg, &fx.enc, &fx.classes).unwrap();
        let losses = out.history.losses();
        assert!(losses.last().unwrap() < losses.first().unwrap(), "{method}: {losses:?}");
    }
}

#[test]
fn runs_are_deterministic_and_leave_the_encoder_frozen() {
    let (fx, train, val, _) = toy_parts();
    let before = fx.enc.weight_digest();
    let mut cfg = TrainConfig::defaults(Method::CoopCsc);
    cfg.epochs = 3;
    let a = train_run(&train, Some(&val), &cfg, &fx.enc, &fx.classes).unwrap();
    let b = train_run(&train, Some(&val), &cfg, &fx.enc, &fx.classes).unwrap();
    assert_eq!(a, b);
    assert_eq!(fx.enc.weight_digest(), before);
    cfg.seed += 1;
    let c = train_run(&train, Some(&val), &cfg, &fx.enc, &fx.classes).unwrap();
    assert_ne!(a.final_params, c.final_params);
}

#[test]
fn best_validation_needs_a_validation_set() {
    let (fx, train, _, _) = toy_parts();
    let cfg = TrainConfig::defaults(Method::NameTuning);
    assert!(train_run(&train, None, &cfg, &fx.enc, &fx.classes).is_err());
}

#[test]
fn grid_search_cases() {
    let (fx, train, val, test) = toy_parts();
    let mut base = TrainConfig::defaults(Method::NameTuning);
    base.epochs = 10;
    base.learning_rate = 4e-3;
    let single = TrainGrid {
        learning_rates: vec![4e-3],
        alphas: vec![0.1],
        context_lengths: vec![0],
    };
    let out = grid_search(&single, &base, &train, &val, Some(&test), &fx.enc, &fx.classes).unwrap();
    assert_eq!(out.scores.len(), 1);
    assert_eq!((out.best.learning_rate, out.best.alpha), (4e-3, 0.1));
    assert!(out.test_accuracy.is_some());

    let dedup = TrainGrid {
        learning_rates: vec![1e-3, 4e-3],
        alphas: vec![0.1],
        context_lengths: vec![0],
    };
    let dup = TrainGrid {
        learning_rates: vec![1e-3, 4e-3, 4e-3, 1e-3],
        ..dedup.clone()
    };
    let a = grid_search(&dedup, &base, &train, &val, None, &fx.enc, &fx.classes).unwrap();
    let b = grid_search(&dup, &base, &train, &val, None, &fx.enc, &fx.classes).unwrap();
    assert_eq!(a.best, b.best);
    assert_eq!(a.final_run, b.final_run);

    let alphas = TrainGrid {
        learning_rates: vec![4e-3],
        alphas: vec![0.01, 1e6],
        context_lengths: vec![0],
    };
    let out = grid_search(&alphas, &base, &train, &val, None, &fx.enc, &fx.classes).unwrap();
    assert_eq!(out.best.alpha, 0.01, "{:?}", out.scores);
    let zs = evaluate(&zero_shot_head(&fx.enc, &prompt(&fx.enc), &fx.classes).unwrap(), &val).unwrap();
    assert!(out.scores[0].val_accuracy > zs, "{:?} vs zero-shot {zs}", out.scores);
}

#[test]
fn random_name_ablation_ignores_alpha() {
    let (fx, train, _, _) = toy_parts();
    let mut cfg = TrainConfig::defaults(Method::NameTuning);
    cfg.ablation_random_names = true;
    cfg.epochs = 2;
    cfg.checkpoint_policy = CheckpointPolicy::FinalEpoch;
    cfg.alpha = 10.0;
    let a = train_run(&train, None, &cfg, &fx.enc, &fx.classes).unwrap();
    cfg.alpha = 0.0;
    let b = train_run(&train, None, &cfg, &fx.enc, &fx.classes).unwrap();
    assert_eq!(a, b);
    assert!(a.final_params.random_names());
}
