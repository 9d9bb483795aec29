mod common;

use common::{brute_force_aggregate, dense_params, mixed_updates, random_model, random_neuron_mask};
use invdrop::nn::ModelShape;
use invdrop::rng::rng_from;
use invdrop::submodel::{aggregate, cost_fraction, extract_submodel, CoordinateUpdate, NeuronMask, SubModel};
use proptest::prelude::*;
use rand::seq::SliceRandom;

#[test]
fn masked_aggregate_matches_brute_force_on_2_2_2() {
    let shape = ModelShape::new(vec![2, 2, 2]).unwrap();
    for seed in 0..100 {
        let global = random_model(&shape, seed + 1000);
        let updates = mixed_updates(&shape, seed);
        assert_eq!(aggregate(&global, &updates).unwrap(), brute_force_aggregate(&global, &updates), "case {seed}");
    }
}

#[test]
fn masked_aggregate_matches_brute_force_on_wider_nets() {
    let shape = ModelShape::new(vec![3, 5, 4, 2]).unwrap();
    for seed in 0..50 {
        let global = random_model(&shape, seed);
        let updates = mixed_updates(&shape, seed + 7);
        assert_eq!(aggregate(&global, &updates).unwrap(), brute_force_aggregate(&global, &updates));
    }
}

#[test]
fn extract_then_aggregate_alone_is_identity() {
    let shape = ModelShape::new(vec![4, 6, 5, 3]).unwrap();
    let global = random_model(&shape, 3);
    let mut rng = rng_from(4);
    for _ in 0..20 {
        let mask = random_neuron_mask(&shape, &mut rng);
        let sub = extract_submodel(&global, &mask).unwrap();
        let up = CoordinateUpdate { client_id: 0, mask, params: sub, n_examples: 9 };
        assert_eq!(aggregate(&global, &[up]).unwrap(), global);
    }
}

#[test]
fn cost_fraction_counts_active_parameters() {
    let shape = ModelShape::new(vec![4, 6, 5, 3]).unwrap();
    let mut rng = rng_from(5);
    for _ in 0..20 {
        let mask = random_neuron_mask(&shape, &mut rng);
        let k = mask.kept_counts();
        let expected = dense_params(&[4, k[0], k[1], 3]) as f64 / dense_params(&[4, 6, 5, 3]) as f64;
        assert_eq!(cost_fraction(&shape, &mask).unwrap(), expected);
    }
}

#[test]
fn mismatched_update_shape_is_rejected() {
    let shape = ModelShape::new(vec![2, 3, 2]).unwrap();
    let global = random_model(&shape, 0);
    let wrong = random_model(&ModelShape::new(vec![2, 2, 2]).unwrap(), 1);
    let up = CoordinateUpdate {
        client_id: 0,
        mask: NeuronMask::full(&shape),
        params: SubModel(wrong),
        n_examples: 1,
    };
    assert!(aggregate(&global, &[up]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn aggregate_ignores_update_order(seed in any::<u64>(), shuffle in any::<u64>()) {
        let shape = ModelShape::new(vec![3, 4, 3, 2]).unwrap();
        let global = random_model(&shape, seed);
        let updates = mixed_updates(&shape, seed);
        let mut shuffled = updates.clone();
        shuffled.shuffle(&mut rng_from(shuffle));
        prop_assert_eq!(aggregate(&global, &updates).unwrap(), aggregate(&global, &shuffled).unwrap());
    }

    #[test]
    fn aggregate_stays_within_covering_range(seed in any::<u64>()) {
        let shape = ModelShape::new(vec![2, 3, 2]).unwrap();
        let global = random_model(&shape, seed);
        let updates = mixed_updates(&shape, seed);
        let out = aggregate(&global, &updates).unwrap().flatten();
        // every update value is within [-3, 3], as is the global init here
        prop_assert!(out.iter().all(|v| v.abs() <= 3.0 + 1e-12));
    }
}
