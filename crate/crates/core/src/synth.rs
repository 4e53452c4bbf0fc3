//! Seeded synthetic streams: a sparse first-order Markov chain over `w0..wN`
//! with injected "facts" (fixed token sequences whose internal transitions
//! the chain never produces). Facts play the role of new knowledge; the
//! `novelty` knob controls how much of the fact pool is replaced at each
//! batch boundary (0 keeps the stream stationary).

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub vocab_size: usize,
    /// Successors per state.
    pub branching: usize,
    /// Successor `j` gets weight `(j + 1)^-zipf`.
    pub zipf: f64,
    pub fact_pool: usize,
    pub fact_len: usize,
    /// Probability, per generated token, of emitting a whole fact instead.
    pub fact_rate: f64,
    /// Fraction of the fact pool replaced by fresh facts at each new batch.
    pub novelty: f64,
    pub batches: usize,
    pub train_tokens: usize,
    pub valid_tokens: usize,
    pub test_tokens: usize,
    /// Size of the fact-free corpus the parametric LM is trained on.
    pub base_tokens: usize,
    /// Size of the fact-free held-out set drawn from the chain alone.
    pub out_of_stream_tokens: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            vocab_size: 60,
            branching: 3,
            zipf: 1.5,
            fact_pool: 200,
            fact_len: 6,
            fact_rate: 0.02,
            novelty: 0.0,
            batches: 10,
            train_tokens: 20_000,
            valid_tokens: 1_000,
            test_tokens: 1_000,
            base_tokens: 30_000,
            out_of_stream_tokens: 2_000,
            seed: 0,
        }
    }
}

/// Transition table of the chain.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovChain {
    /// Per state: `(successor, probability)`, descending probability.
    transitions: Vec<Vec<(usize, f64)>>,
}

impl MarkovChain {
    pub fn random(states: usize, branching: usize, zipf: f64, rng: &mut Rng) -> Self {
        let branching = branching.clamp(1, states);
        let weights: Vec<f64> = (0..branching).map(|j| ((j + 1) as f64).powf(-zipf)).collect();
        let total: f64 = weights.iter().sum();
        let transitions = (0..states)
            .map(|_| {
                sample(rng, states, branching)
                    .into_iter()
                    .zip(&weights)
                    .map(|(s, w)| (s, w / total))
                    .collect()
            })
            .collect();
        Self { transitions }
    }

    pub fn states(&self) -> usize {
        self.transitions.len()
    }

    pub fn transitions(&self) -> &[Vec<(usize, f64)>] {
        &self.transitions
    }

    pub fn next(&self, state: usize, rng: &mut Rng) -> usize {
        let mut u: f64 = rng.random();
        let succ = &self.transitions[state];
        for &(s, p) in succ {
            if u < p {
                return s;
            }
            u -= p;
        }
        succ.last().unwrap().0
    }
}

pub fn token_name(id: usize) -> String {
    format!("w{id}")
}

/// One batch of token strings.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticBatch {
    pub batch_id: u64,
    pub train: Vec<String>,
    pub valid: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticStream {
    pub chain: MarkovChain,
    pub base_corpus: Vec<String>,
    pub out_of_stream: Vec<String>,
    pub batches: Vec<SyntheticBatch>,
}

fn random_fact(config: &SyntheticConfig, rng: &mut Rng) -> Vec<usize> {
    (0..config.fact_len)
        .map(|_| rng.random_range(0..config.vocab_size))
        .collect()
}

fn generate_sequence(
    chain: &MarkovChain,
    facts: &[Vec<usize>],
    fact_rate: f64,
    len: usize,
    rng: &mut Rng,
) -> Vec<String> {
    let mut out = Vec::with_capacity(len);
    let mut state = rng.random_range(0..chain.states());
    out.push(state);
    while out.len() < len {
        if !facts.is_empty() && rng.random_bool(fact_rate) {
            let fact = &facts[rng.random_range(0..facts.len())];
            let room = len - out.len();
            out.extend_from_slice(&fact[..fact.len().min(room)]);
            state = *out.last().unwrap();
        } else {
            state = chain.next(state, rng);
            out.push(state);
        }
    }
    out.into_iter().map(token_name).collect()
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 || self.branching < 1 || self.batches < 1 {
            return Err(Error::invalid("synthetic stream needs >= 2 types, >= 1 successor and >= 1 batch"));
        }
        if !(0.0..=1.0).contains(&self.fact_rate) || !(0.0..=1.0).contains(&self.novelty) {
            return Err(Error::invalid("fact_rate and novelty must lie in [0, 1]"));
        }
        if self.fact_pool > 0 && self.fact_len < 2 {
            return Err(Error::invalid("facts need at least two tokens"));
        }
        Ok(())
    }

    pub fn generate(&self) -> Result<SyntheticStream> {
        self.validate()?;
        let chain = MarkovChain::random(
            self.vocab_size,
            self.branching,
            self.zipf,
            &mut rng::substream(self.seed, "synth-chain", 0),
        );
        let base_corpus = generate_sequence(
            &chain,
            &[],
            0.0,
            self.base_tokens,
            &mut rng::substream(self.seed, "synth-base", 0),
        );
        let out_of_stream = generate_sequence(
            &chain,
            &[],
            0.0,
            self.out_of_stream_tokens,
            &mut rng::substream(self.seed, "synth-oos", 0),
        );

        let mut fact_rng = rng::substream(self.seed, "synth-facts", 0);
        let mut facts: Vec<Vec<usize>> = (0..self.fact_pool)
            .map(|_| random_fact(self, &mut fact_rng))
            .collect();
        let replace = (self.novelty * self.fact_pool as f64).round() as usize;
        let mut batches = Vec::with_capacity(self.batches);
        for b in 0..self.batches {
            if b > 0 && replace > 0 {
                for slot in sample(&mut fact_rng, self.fact_pool, replace) {
                    facts[slot] = random_fact(self, &mut fact_rng);
                }
            }
            let split = |label: &str, len: usize| {
                let mut r = rng::substream(self.seed, label, b as u64);
                generate_sequence(&chain, &facts, self.fact_rate, len, &mut r)
            };
            batches.push(SyntheticBatch {
                batch_id: b as u64,
                train: split("synth-train", self.train_tokens),
                valid: split("synth-valid", self.valid_tokens),
                test: split("synth-test", self.test_tokens),
            });
        }
        Ok(SyntheticStream {
            chain,
            base_corpus,
            out_of_stream,
            batches,
        })
    }
}
