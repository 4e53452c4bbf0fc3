mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semem::calibrator::{train, CalibratorConfig, CalibratorTrainExample, CalibratorWeights};
use semem::rng::substream;

use common::random_features;

const D: usize = 16;

fn dataset(n: usize, seed: u64, gold: impl Fn(&mut ChaCha8Rng) -> (f64, f64)) -> Vec<CalibratorTrainExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let features = random_features(D, &mut rng);
            let (p_lm_gold, p_mem_gold) = gold(&mut rng);
            CalibratorTrainExample {
                features,
                p_lm_gold,
                p_mem_gold,
            }
        })
        .collect()
}

fn fresh() -> CalibratorWeights {
    CalibratorWeights::new(D, &CalibratorConfig::default(), 4)
}

fn mean_lambda(w: &CalibratorWeights, examples: &[CalibratorTrainExample]) -> f64 {
    examples.iter().map(|e| w.predict_lambda(&e.features).unwrap()).sum::<f64>() / examples.len() as f64
}

#[test]
fn perfect_memory_drives_lambda_towards_one() {
    let vocab = 50.0;
    let examples = dataset(64, 1, |_| (1.0 / vocab, 1.0));
    // 64 examples in minibatches of 16: 50 epochs is 200 Adam steps.
    let out = train(fresh(), &examples, &[], 50, &CalibratorConfig::default(), 2).unwrap();
    let lambda = mean_lambda(&out.weights, &examples);
    assert!(lambda > 0.9, "mean lambda {lambda}");
}

#[test]
fn symmetric_data_leaves_the_loss_unchanged() {
    let examples = dataset(48, 3, |r| {
        let q = r.random_range(0.05..0.95);
        (q, q)
    });
    let out = train(fresh(), &examples, &[], 3, &CalibratorConfig::default(), 5).unwrap();
    let first = out.loss_trace[0];
    assert!(out.loss_trace.iter().all(|l| (l - first).abs() < 1e-6), "{:?}", out.loss_trace);
}

#[test]
fn training_is_deterministic_per_seed() {
    let examples = dataset(40, 6, |r| (r.random_range(0.01..0.5), r.random_range(0.0..1.0)));
    let cfg = CalibratorConfig::default();
    let a = train(fresh(), &examples, &[], 2, &cfg, 8).unwrap();
    let b = train(fresh(), &examples, &[], 2, &cfg, 8).unwrap();
    assert_eq!(a.loss_trace, b.loss_trace);
    assert_eq!(a.weights, b.weights);
    let c = train(fresh(), &examples, &[], 2, &cfg, 9).unwrap();
    assert_ne!(a.weights, c.weights);
}

#[test]
fn better_memory_gives_a_monotone_loss_trend() {
    let examples = dataset(64, 10, |r| {
        let lm = r.random_range(0.01..0.4);
        (lm, lm + r.random_range(0.05..0.5))
    });
    let out = train(fresh(), &examples, &[], 8, &CalibratorConfig::default(), 11).unwrap();
    let trace = &out.loss_trace;
    assert!(trace[1] <= trace[0]);
    for w in trace[1..].windows(2) {
        assert!(w[1] <= w[0] + 1e-6, "{trace:?}");
    }
}

#[test]
fn validation_keeps_the_best_checkpoint() {
    let gold = |r: &mut ChaCha8Rng| (r.random_range(0.01..0.5), r.random_range(0.0..1.0));
    let examples = dataset(48, 12, gold);
    let held = dataset(24, 13, gold);
    let out = train(fresh(), &examples, &held, 4, &CalibratorConfig::default(), 14).unwrap();
    assert_eq!(out.validation_trace.len(), 5);
    let best = out.validation_trace.iter().copied().fold(f64::INFINITY, f64::min);
    assert_eq!(out.weights.mean_loss(&held).unwrap(), best);
    assert_eq!(out.validation_trace[out.selected_epoch], best);

    let plain = train(fresh(), &examples, &[], 4, &CalibratorConfig::default(), 14).unwrap();
    assert!(plain.validation_trace.is_empty());
    assert_eq!(plain.selected_epoch, 4);
}

#[test]
fn empty_training_set_is_rejected() {
    assert!(train(fresh(), &[], &[], 1, &CalibratorConfig::default(), 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lambda_stays_strictly_inside_the_unit_interval(seed in any::<u64>(), scale in 0.1f64..20.0) {
        let cfg = CalibratorConfig { width: 16, ..Default::default() };
        let mut w = CalibratorWeights::new(D, &cfg, seed);
        for t in w.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= scale);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = random_features(D, &mut rng);
        let lambda = w.predict_lambda(&f).unwrap();
        prop_assert!(lambda > 0.0 && lambda < 1.0);
        let dropped = w.predict_lambda_train(&f, &mut substream(seed, "p", 0)).unwrap();
        prop_assert!(dropped > 0.0 && dropped < 1.0);
    }
}
