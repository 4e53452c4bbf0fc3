#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use semem::calibrator::{CalibratorFeatures, TOP_NEIGHBORS};
use semem::harness::{EvalSet, StreamBatch};
use semem::synth::{token_name, SyntheticConfig, SyntheticStream};
use semem::{RefLmConfig, ReferenceLm, TokenId, Vocabulary};

/// Sparse, sharp chain (0.97 / 0.03 successors) with 8-token facts making
/// up roughly a quarter of the stream.
pub fn stream_config(seed: u64) -> SyntheticConfig {
    SyntheticConfig {
        vocab_size: 100,
        branching: 2,
        zipf: 5.0,
        fact_pool: 1000,
        fact_len: 8,
        fact_rate: 0.05,
        novelty: 0.0,
        batches: 10,
        train_tokens: 20_000,
        valid_tokens: 10_000,
        test_tokens: 1_000,
        base_tokens: 30_000,
        out_of_stream_tokens: 2_000,
        seed,
    }
}

pub fn lm_config(seed: u64) -> RefLmConfig {
    RefLmConfig {
        d: 64,
        m: 3,
        epochs: 3,
        learning_rate: 0.05,
        seed,
    }
}

pub struct Scenario {
    pub stream: SyntheticStream,
    pub vocab: Vocabulary,
    pub base: Vec<TokenId>,
    pub batches: Vec<StreamBatch>,
    pub out_of_stream: Vec<TokenId>,
}

impl Scenario {
    pub fn new(config: &SyntheticConfig) -> Self {
        let stream = config.generate().unwrap();
        let names: Vec<String> = (0..config.vocab_size).map(token_name).collect();
        let vocab = Vocabulary::build(&names, config.vocab_size + 1).unwrap();
        let batches = stream
            .batches
            .iter()
            .map(|b| {
                StreamBatch::new(
                    b.batch_id,
                    vocab.encode(&b.train),
                    vocab.encode(&b.valid),
                    vocab.encode(&b.test),
                )
            })
            .collect();
        Self {
            base: vocab.encode(&stream.base_corpus),
            out_of_stream: vocab.encode(&stream.out_of_stream),
            vocab,
            batches,
            stream,
        }
    }

    pub fn train_lm(&self, config: &RefLmConfig) -> ReferenceLm {
        ReferenceLm::train(&self.base, self.vocab.clone(), config).unwrap().0
    }

    pub fn oos_set(&self) -> EvalSet {
        EvalSet::new("out_of_stream", self.out_of_stream.clone())
    }

    /// Every batch's test split, concatenated in stream order.
    pub fn held_out(&self) -> Vec<TokenId> {
        self.batches.iter().flat_map(|b| b.test.iter().copied()).collect()
    }
}

/// Mean next-token NLL of the bare LM, summed straight from its log-probabilities.
pub fn bare_ppl(lm: &ReferenceLm, tokens: &[TokenId]) -> f64 {
    let mut nll = 0.0;
    for t in 1..tokens.len() {
        nll -= lm.forward(&tokens[..t]).unwrap().log_probs[tokens[t] as usize];
    }
    (nll / (tokens.len() - 1) as f64).exp()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

/// Plausible calibrator inputs: sorted distances, non-decreasing distinct counts.
pub fn random_features(d: usize, rng: &mut ChaCha8Rng) -> CalibratorFeatures {
    let mut dists: Vec<f64> = (0..TOP_NEIGHBORS).map(|_| rng.random_range(0.0..6.0)).collect();
    dists.sort_by(f64::total_cmp);
    let mut distinct = [0.0; TOP_NEIGHBORS];
    let mut k = 1.0f64;
    for slot in &mut distinct {
        k += f64::from(u8::from(rng.random_bool(0.4)));
        *slot = k.ln_1p();
    }
    CalibratorFeatures {
        hidden: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
        conf: rng.random_range(0.05..1.0),
        ent: rng.random_range(0.0..4.0),
        log_freq_last: rng.random_range(0.0..9.0),
        log_distinct_last: rng.random_range(0.0..4.0),
        top_dists: dists.try_into().unwrap(),
        log_distinct_retrieved: distinct,
    }
}
