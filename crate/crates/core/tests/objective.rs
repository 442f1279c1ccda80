//! Objective values and gradients against independent oracles.

mod common;

use common::*;
use nametune::classify::{tuned_head, zero_shot_head};
use nametune::encoder::FrozenDualEncoder;
use nametune::rng::SeededRng;
use nametune::textparams::{init_parameters, Method};
use nametune::train::{gradients, loss, loss_and_gradients, Example};

#[test]
fn zero_offsets_reduce_to_zero_shot_cross_entropy() {
    let enc = transformer();
    let classes = toy_classes(&enc, 4);
    let p = prompt(&enc);
    let params = init_parameters(Method::NameTuning, &classes, 0, Some(&p), &SeededRng::new(1), false).unwrap();
    let head = zero_shot_head(&enc, &p, &classes).unwrap();
    let mut rng = SeededRng::new(2);
    let batch = random_batch(&mut rng, 6, enc.space().d_embed, classes.len());
    let expected: f64 = batch
        .iter()
        .map(|ex| -head.probabilities(ex.embedding.view()).unwrap()[ex.label].ln())
        .sum();
    let got = loss(&params, &batch, &enc, &classes, 100.0).unwrap();
    assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
}

#[test]
fn certain_prediction_has_zero_loss() {
    let enc = linear();
    let classes = toy_classes(&enc, 1);
    let p = prompt(&enc);
    let params = init_parameters(Method::NameTuning, &classes, 0, Some(&p), &SeededRng::new(1), false).unwrap();
    let mut rng = SeededRng::new(3);
    let batch = vec![Example::new(random_vector(&mut rng, enc.space().d_embed, 1.0), 0)];
    assert_eq!(loss(&params, &batch, &enc, &classes, 5.0).unwrap(), 0.0);
}

#[test]
fn small_linear_instances_match_the_transcribed_objective() {
    let enc = linear();
    let classes = toy_classes(&enc, 3);
    let mut rng = SeededRng::new(11);
    for _ in 0..25 {
        let params = random_params(Method::NameTuning, &enc, &classes, 0, &mut rng, 0.3);
        let batch = random_batch(&mut rng, 2, enc.space().d_embed, 3);
        let alpha = rng.uniform() * 2.0;
        let got = loss(&params, &batch, &enc, &classes, alpha).unwrap();
        let want = oracle_loss(&params, &batch, &enc, &classes, alpha);
        assert!((got - want).abs() <= 1e-6 * want.abs().max(1.0), "{got} vs {want}");
    }
}

#[test]
fn empty_batch_gradient_is_alpha_times_offset() {
    let enc = transformer();
    let classes = toy_classes(&enc, 3);
    let mut rng = SeededRng::new(5);
    let alpha = 1e4;
    let params = random_params(Method::NameTuning, &enc, &classes, 0, &mut rng, 0.5);
    let g = gradients(&params, &[], &enc, &classes, alpha).unwrap();
    for (gi, ei) in g.iter().zip(params.offsets().unwrap()) {
        assert_eq!(gi, &ei.mapv(|v| alpha * v));
    }
}

#[test]
fn cona_contexts_get_no_penalty_gradient() {
    let enc = transformer();
    let classes = toy_classes(&enc, 3);
    let mut rng = SeededRng::new(6);
    let params = random_params(Method::Cona, &enc, &classes, 4, &mut rng, 0.5);
    let (value, g) = loss_and_gradients(&params, &[], &enc, &classes, 3.0).unwrap();
    assert!(g[0].iter().all(|&v| v == 0.0));
    let sq: f64 = params.offsets().unwrap().iter().flat_map(|e| e.iter()).map(|v| v * v).sum();
    assert!((value - 1.5 * sq).abs() < 1e-12);
}

#[test]
fn gradients_match_finite_differences_under_cosine_linear() {
    let enc = linear_cosine();
    let classes = toy_classes(&enc, 3);
    let mut rng = SeededRng::new(9);
    for method in METHODS {
        for _ in 0..5 {
            let l = if method == Method::NameTuning { 0 } else { 2 };
            let params = random_params(method, &enc, &classes, l, &mut rng, 0.2);
            let batch = random_batch(&mut rng, 4, enc.space().d_embed, 3);
            let analytic: Vec<f64> = gradients(&params, &batch, &enc, &classes, 0.7)
                .unwrap()
                .iter()
                .flat_map(|g| g.iter().copied().collect::<Vec<_>>())
                .collect();
            let numeric = finite_difference_gradient(&params, &batch, &enc, &classes, 0.7);
            let err = relative_error(&analytic, &numeric);
            assert!(err < 1e-4, "{method}: relative error {err:e}");
        }
    }
}

#[test]
fn objective_rejects_bad_batches() {
    let enc = linear();
    let classes = toy_classes(&enc, 2);
    let mut rng = SeededRng::new(4);
    let params = random_params(Method::Coop, &enc, &classes, 2, &mut rng, 0.1);
    let d = enc.space().d_embed;
    let bad_label = vec![Example::new(random_vector(&mut rng, d, 1.0), 2)];
    assert!(loss(&params, &bad_label, &enc, &classes, 0.0).is_err());
    let bad_width = vec![Example::new(random_vector(&mut rng, d + 1, 1.0), 0)];
    assert!(loss(&params, &bad_width, &enc, &classes, 0.0).is_err());
    let ok = vec![Example::new(random_vector(&mut rng, d, 1.0), 0)];
    assert!(loss(&params, &ok, &enc, &classes, -1.0).is_err());
    let other = toy_classes(&enc, 3);
    assert!(loss(&params, &ok, &enc, &other, 0.0).is_err());
}

#[test]
fn tuned_head_probabilities_match_the_oracle() {
    let enc = transformer();
    let classes = toy_classes(&enc, 4);
    let mut rng = SeededRng::new(12);
    for method in METHODS {
        let l = if method == Method::NameTuning { 0 } else { 3 };
        let params = random_params(method, &enc, &classes, l, &mut rng, 0.2);
        let head = tuned_head(&enc, &params, &classes).unwrap();
        let text = class_text(&params, &enc, &classes);
        let v = random_vector(&mut rng, enc.space().d_embed, 1.0);
        let got = head.probabilities(v.view()).unwrap();
        let want = oracle_probabilities(&text, v.as_slice().unwrap(), enc.space().similarity, enc.space().temperature);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
