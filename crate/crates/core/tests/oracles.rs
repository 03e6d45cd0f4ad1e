//! Cross-module checks against independent reference computations.

use fedar_core::availability::sample_probabilities;
use fedar_core::config::DatasetSpec;
use fedar_core::data::{synth_classes, train_test_split};
use fedar_core::engine::run_experiment;
use fedar_core::model::{local_sgd, ModelSpec};
use fedar_core::strategies::StrategyKind;
use fedar_core::ExperimentConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Centralized logistic regression trained by plain mini-batch SGD.
fn central_accuracy(separation: f64, classes: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all = synth_classes(classes, 200, 6, separation, &mut rng).unwrap();
    let (train, test) = train_test_split(&all, 0.25, &mut rng).unwrap();
    let model = ModelSpec::logistic(6, classes, 0.0);
    let w = local_sgd(&model, &model.init(&mut rng), &train, 400, 0.1, 32, &mut rng).unwrap();
    model.accuracy(&w, &test).unwrap()
}

#[test]
fn well_separated_blobs_are_learned_centrally() {
    for seed in 0..3 {
        let acc = central_accuracy(10.0, 3, seed);
        assert!(acc > 0.99, "seed {seed}: accuracy {acc}");
    }
}

#[test]
fn identical_blobs_give_chance_accuracy() {
    // 4 classes, 200 test samples per seed: chance is 0.25 with sd ~0.03.
    let mean: f64 = (0..8).map(|s| central_accuracy(0.0, 4, s)).sum::<f64>() / 8.0;
    assert!((mean - 0.25).abs() < 0.05, "mean accuracy {mean}");
}

#[test]
fn probability_mean_matches_uniform() {
    // U[0.1, 1] has mean 0.55 and sd 0.9 / sqrt(12).
    let p = sample_probabilities(100, 0.1, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let mean = p.iter().sum::<f64>() / 100.0;
    let se = 0.9 / 12f64.sqrt() / 10.0;
    assert!((mean - 0.55).abs() < 3.0 * se, "mean {mean}");
}

#[test]
fn full_availability_gives_matching_fedar_and_fedavg_records() {
    let mut c = ExperimentConfig::new(
        StrategyKind::Fedar,
        6,
        20,
        DatasetSpec::Synthetic {
            num_classes: 6,
            per_class: 40,
            input_dim: 5,
            separation: 2.0,
            test_fraction: 0.2,
        },
    );
    c.p_min = 1.0;
    let a = run_experiment(&c).unwrap();
    c.strategy = StrategyKind::Fedavg;
    let b = run_experiment(&c).unwrap();
    for (x, y) in a.records.iter().zip(&b.records) {
        assert_eq!(x.participating, y.participating);
        assert_eq!(x.contributors, y.contributors);
        assert!((x.global_train_loss - y.global_train_loss).abs() < 1e-12);
        assert_eq!(x.global_test_accuracy, y.global_test_accuracy);
    }
}
