mod common;

use semem::synth::SyntheticConfig;
use semem::ReferenceLm;

use common::{lm_config, Scenario};

fn chain_scenario() -> Scenario {
    Scenario::new(&SyntheticConfig {
        vocab_size: 30,
        branching: 3,
        zipf: 1.0,
        fact_pool: 0,
        batches: 1,
        train_tokens: 10,
        valid_tokens: 10,
        test_tokens: 10,
        base_tokens: 30_000,
        out_of_stream_tokens: 3_000,
        seed: 5,
        ..Default::default()
    })
}

/// Entropy rate of the chain: sum over states of stationary mass times
/// the entropy of that state's successor row.
fn chain_entropy_rate(transitions: &[Vec<(usize, f64)>]) -> f64 {
    let n = transitions.len();
    let mut pi = vec![1.0 / n as f64; n];
    for _ in 0..10_000 {
        let mut next = vec![0.0; n];
        for (s, row) in transitions.iter().enumerate() {
            for &(t, p) in row {
                next[t] += pi[s] * p;
            }
        }
        pi = next;
    }
    transitions
        .iter()
        .zip(&pi)
        .map(|(row, w)| -w * row.iter().map(|&(_, p)| p * p.ln()).sum::<f64>())
        .sum()
}

#[test]
fn converged_perplexity_is_near_the_chain_entropy() {
    let sc = chain_scenario();
    let cfg = semem::RefLmConfig {
        d: 32,
        m: 1,
        epochs: 5,
        // Constant-step SGD settles at a noise floor set by the step.
        learning_rate: 0.01,
        ..lm_config(5)
    };
    let lm = sc.train_lm(&cfg);
    let analytic = chain_entropy_rate(sc.stream.chain.transitions()).exp();
    let ppl = lm.cross_entropy(&sc.out_of_stream).unwrap().exp();
    assert!(
        (ppl - analytic).abs() <= 0.1 * analytic,
        "model perplexity {ppl:.4} vs chain {analytic:.4}"
    );
}

#[test]
fn training_is_seeded_and_reduces_loss() {
    let sc = chain_scenario();
    let cfg = semem::RefLmConfig { epochs: 2, ..lm_config(9) };
    let (a, trace) = ReferenceLm::train(&sc.base, sc.vocab.clone(), &cfg).unwrap();
    let (b, _) = ReferenceLm::train(&sc.base, sc.vocab.clone(), &cfg).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());
    assert_eq!(trace.cross_entropy.len(), 3);
    assert!(trace.cross_entropy.windows(2).all(|w| w[1] < w[0]));
    let (c, _) = ReferenceLm::train(&sc.base, sc.vocab.clone(), &semem::RefLmConfig { seed: 10, ..cfg }).unwrap();
    assert_ne!(a.to_bytes(), c.to_bytes());
}
