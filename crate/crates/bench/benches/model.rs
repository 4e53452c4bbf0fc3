use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::Rng as _;
use semem::calibrator::{CalibratorConfig, CalibratorFeatures, CalibratorTrainExample, CalibratorWeights};
use semem::rng::substream;
use semem::{RefLmConfig, ReferenceLm, Vocabulary};

fn lm_forward(c: &mut Criterion) {
    let words: Vec<String> = (0..1000).map(|i| format!("w{i}")).collect();
    let vocab = Vocabulary::build(&words, 1001).unwrap();
    let lm = ReferenceLm::new(
        vocab,
        &RefLmConfig {
            d: 128,
            ..RefLmConfig::default()
        },
    )
    .unwrap();
    let context: Vec<u32> = (1..=32).collect();
    c.bench_function("lm/forward/v1000-d128", |b| b.iter(|| lm.forward(black_box(&context)).unwrap()));
}

fn features(d: usize) -> CalibratorFeatures {
    let mut rng = substream(0, "bench-features", 0);
    CalibratorFeatures {
        hidden: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
        conf: 0.6,
        ent: 1.2,
        log_freq_last: 5.0,
        log_distinct_last: 2.0,
        top_dists: std::array::from_fn(|i| 0.5 + i as f64 * 0.1),
        log_distinct_retrieved: std::array::from_fn(|i| (1.0 + i as f64 / 2.0).ln_1p()),
    }
}

fn calibrator(c: &mut Criterion) {
    const D: usize = 64;
    let weights = CalibratorWeights::new(D, &CalibratorConfig::default(), 0);
    let example = CalibratorTrainExample {
        features: features(D),
        p_lm_gold: 0.1,
        p_mem_gold: 0.7,
    };
    c.bench_function("calibrator/forward", |b| {
        b.iter(|| weights.predict_lambda(black_box(&example.features)).unwrap())
    });
    let mut rng = substream(0, "bench-dropout", 0);
    c.bench_function("calibrator/forward-backward", |b| {
        b.iter(|| weights.loss_and_grad(black_box(&example), Some(&mut rng)).unwrap())
    });
}

criterion_group!(benches, lm_forward, calibrator);
criterion_main!(benches);
