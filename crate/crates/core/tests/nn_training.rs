mod common;

use common::{gradient_check, random_batch, random_model};
use invdrop::nn::{evaluate, local_train, loss_and_grads, Hyperparams, Model, ModelShape};
use proptest::prelude::*;

#[test]
fn gradients_match_finite_differences_on_3_4_3() {
    let shape = ModelShape::new(vec![3, 4, 3]).unwrap();
    for seed in 0..5 {
        let model = random_model(&shape, seed);
        let batch = random_batch(3, 3, 7, seed + 100);
        let err = gradient_check(&model, &batch, 1e-5, 1e-6);
        assert!(err < 1e-4, "seed {seed}: relative error {err}");
    }
}

#[test]
fn gradients_match_on_deeper_nets() {
    let shape = ModelShape::new(vec![5, 6, 4, 3]).unwrap();
    let model = random_model(&shape, 9);
    let batch = random_batch(5, 3, 11, 10);
    assert!(gradient_check(&model, &batch, 1e-5, 1e-6) < 1e-4);
}

#[test]
fn one_full_batch_step_is_plain_gradient_descent() {
    let shape = ModelShape::new(vec![4, 5, 3]).unwrap();
    let model = random_model(&shape, 1);
    let batch = random_batch(4, 3, 10, 2);
    let hp = Hyperparams { learning_rate: 0.3, batch_size: 10, local_epochs: 1, seed: 5 };
    let trained = local_train(&model, &batch, &hp).unwrap();

    let (_, grads) = loss_and_grads(&model, &batch).unwrap();
    let expected: Vec<f64> = model
        .flatten()
        .iter()
        .zip(grads.flatten())
        .map(|(w, g)| w - 0.3 * g)
        .collect();
    for (a, b) in trained.model.flatten().iter().zip(&expected) {
        // the shuffled row order only changes summation order
        assert!((a - b).abs() < 1e-12);
    }
    assert_eq!(trained.n_examples, 10);
}

#[test]
fn full_batch_epochs_equal_repeated_steps() {
    let shape = ModelShape::new(vec![2, 3, 2]).unwrap();
    let model = random_model(&shape, 3);
    let batch = random_batch(2, 2, 3, 4);
    let hp = |epochs| Hyperparams { learning_rate: 0.1, batch_size: 1, local_epochs: epochs, seed: 11 };
    let two = local_train(&model, &batch, &hp(2)).unwrap();
    assert_eq!(two, local_train(&model, &batch, &hp(2)).unwrap());
    assert_ne!(two.model, local_train(&model, &batch, &hp(1)).unwrap().model);

    // a full-batch step per epoch: k epochs equal k manual steps exactly
    let full = Hyperparams { learning_rate: 0.2, batch_size: 3, local_epochs: 4, seed: 0 };
    let mut manual = model.clone();
    for _ in 0..4 {
        let (_, g) = loss_and_grads(&manual, &batch).unwrap();
        manual.sgd_step(&g, 0.2);
    }
    let trained = local_train(&model, &batch, &full).unwrap().model;
    for (a, b) in trained.flatten().iter().zip(manual.flatten()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn random_labels_stay_near_chance() {
    let classes = 4;
    let shape = ModelShape::new(vec![6, 16, classes]).unwrap();
    let model = random_model(&shape, 21);
    let train = random_batch(6, classes, 400, 22);
    let held_out = random_batch(6, classes, 4000, 23);
    let hp = Hyperparams { learning_rate: 0.05, batch_size: 32, local_epochs: 3, seed: 1 };
    let trained = local_train(&model, &train, &hp).unwrap().model;
    let (_, acc) = evaluate(&trained, &held_out).unwrap();
    assert!((acc - 1.0 / classes as f64).abs() < 0.05, "accuracy {acc}");
}

#[test]
fn training_reduces_loss_on_learnable_data() {
    let ds = invdrop::data::synth_blobs(2, 3, 4, 60, 0.3).unwrap();
    let all: Vec<usize> = (0..ds.len()).collect();
    let batch = ds.batch(&all).unwrap();
    let model = Model::init(&ModelShape::new(vec![4, 8, 3]).unwrap(), 0);
    let hp = Hyperparams { learning_rate: 0.1, batch_size: 16, local_epochs: 20, seed: 0 };
    let before = evaluate(&model, &batch).unwrap();
    let after = evaluate(&local_train(&model, &batch, &hp).unwrap().model, &batch).unwrap();
    assert!(after.0 < before.0);
    assert!(after.1 > 0.9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn gradient_check_holds_for_random_nets(
        input in 1usize..5,
        hidden in proptest::collection::vec(1usize..6, 1..3),
        classes in 2usize..5,
        n in 1usize..8,
        seed in any::<u64>(),
    ) {
        let shape = ModelShape::from_parts(input, &hidden, classes).unwrap();
        let model = random_model(&shape, seed);
        let batch = random_batch(input, classes, n, seed.wrapping_add(1));
        let err = gradient_check(&model, &batch, 1e-5, 1e-6);
        prop_assert!(err < 1e-4, "relative error {}", err);
    }

    #[test]
    fn softmax_rows_are_distributions(seed in any::<u64>(), n in 1usize..6) {
        let shape = ModelShape::new(vec![3, 4, 5]).unwrap();
        let logits = invdrop::nn::forward(&random_model(&shape, seed), &random_batch(3, 5, n, seed)).unwrap();
        let p = invdrop::nn::softmax_rows(&logits);
        for row in p.chunks(5) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }
}
