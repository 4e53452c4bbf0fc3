//! The parametric side: a small windowed neural LM whose hidden layer doubles
//! as the memory key space, plus the probability-source abstraction used for
//! perplexity.
//!
//! Architecture: the last `m` token embeddings (each `d` wide) are
//! concatenated, passed through one `tanh` layer of width `d` (the context
//! representation), then a linear layer and softmax over the vocabulary.
//! Weights are stored as `f32`; every accumulation runs in `f64`.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution as _, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::knn::Distribution;
use crate::rng;
use crate::vocab::{TokenId, Vocabulary, UNK_ID};

const LM_MAGIC: &[u8] = b"SEMLM1";

/// The LM's hidden representation of a leftward context; the memory key type.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextRep(pub Vec<f32>);

impl std::ops::Deref for ContextRep {
    type Target = [f32];
    fn deref(&self) -> &[f32] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmOutput {
    /// Natural-log probabilities over the vocabulary.
    pub log_probs: Vec<f64>,
    pub hidden: ContextRep,
}

impl LmOutput {
    pub fn distribution(&self) -> Distribution {
        Distribution::from_log_probs(&self.log_probs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefLmConfig {
    /// Hidden (and embedding) width.
    pub d: usize,
    /// Context window length.
    pub m: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for RefLmConfig {
    fn default() -> Self {
        Self {
            d: 64,
            m: 8,
            epochs: 5,
            learning_rate: 0.05,
            seed: 0,
        }
    }
}

impl RefLmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d < 2 {
            return Err(Error::invalid("d must be at least 2"));
        }
        if self.m < 1 {
            return Err(Error::invalid("m must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceLm {
    vocab: Vocabulary,
    d: usize,
    m: usize,
    /// V x d
    embed: Vec<f32>,
    /// d x (m*d)
    w_hidden: Vec<f32>,
    b_hidden: Vec<f32>,
    /// V x d
    w_out: Vec<f32>,
    b_out: Vec<f32>,
}

/// Per-epoch training cross-entropy; entry 0 is the untrained model.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainTrace {
    pub cross_entropy: Vec<f64>,
}

impl ReferenceLm {
    /// Randomly initialized under `config.seed`.
    pub fn new(vocab: Vocabulary, config: &RefLmConfig) -> Result<Self> {
        config.validate()?;
        let (v, d, m) = (vocab.len(), config.d, config.m);
        let mut rng = rng::substream(config.seed, "lm-init", 0);
        let mut sample = |n: usize, std: f64| -> Vec<f32> {
            let normal = Normal::new(0.0, std).unwrap();
            (0..n).map(|_| normal.sample(&mut rng) as f32).collect()
        };
        let embed = sample(v * d, 0.3);
        let w_hidden = sample(d * m * d, 1.0 / ((m * d) as f64).sqrt());
        let w_out = sample(v * d, 1.0 / (d as f64).sqrt());
        Ok(Self {
            vocab,
            d,
            m,
            embed,
            w_hidden,
            b_hidden: vec![0.0; d],
            w_out,
            b_out: vec![0.0; v],
        })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn hidden_dim(&self) -> usize {
        self.d
    }

    pub fn window_len(&self) -> usize {
        self.m
    }

    /// Zeroes the output layer, which makes every prediction uniform.
    pub fn zero_output_layer(&mut self) {
        self.w_out.fill(0.0);
        self.b_out.fill(0.0);
    }

    fn window(&self, context: &[TokenId]) -> Result<Vec<TokenId>> {
        if context.is_empty() {
            return Err(Error::invalid("empty context"));
        }
        for &t in context {
            self.vocab.check(t)?;
        }
        let tail = &context[context.len().saturating_sub(self.m)..];
        let mut w = vec![UNK_ID; self.m - tail.len()];
        w.extend_from_slice(tail);
        Ok(w)
    }

    fn input(&self, window: &[TokenId]) -> Vec<f64> {
        let d = self.d;
        window
            .iter()
            .flat_map(|&t| self.embed[t as usize * d..(t as usize + 1) * d].iter())
            .map(|&x| f64::from(x))
            .collect()
    }

    fn hidden(&self, x: &[f64]) -> Vec<f64> {
        let width = x.len();
        (0..self.d)
            .map(|i| {
                let row = &self.w_hidden[i * width..(i + 1) * width];
                let z = dot_mixed(row, x);
                (z + f64::from(self.b_hidden[i])).tanh()
            })
            .collect()
    }

    fn log_softmax(&self, h: &[f64]) -> Vec<f64> {
        let d = self.d;
        let logits: Vec<f64> = (0..self.vocab.len())
            .map(|y| {
                let row = &self.w_out[y * d..(y + 1) * d];
                dot_mixed(row, h)
                    + f64::from(self.b_out[y])
            })
            .collect();
        log_softmax(&logits)
    }

    pub fn forward(&self, context: &[TokenId]) -> Result<LmOutput> {
        let window = self.window(context)?;
        let h = self.hidden(&self.input(&window));
        let log_probs = self.log_softmax(&h);
        Ok(LmOutput {
            log_probs,
            hidden: ContextRep(h.iter().map(|&x| x as f32).collect()),
        })
    }

    /// Mean next-token negative log-likelihood over positions `1..len`.
    pub fn cross_entropy(&self, corpus: &[TokenId]) -> Result<f64> {
        Ok(perplexity(self, corpus)?.ln())
    }

    /// Trains by per-position SGD on shuffled positions.
    pub fn train(
        corpus: &[TokenId],
        vocab: Vocabulary,
        config: &RefLmConfig,
    ) -> Result<(Self, TrainTrace)> {
        let mut lm = Self::new(vocab, config)?;
        if corpus.len() <= lm.m {
            return Err(Error::invalid(format!(
                "corpus of {} tokens is shorter than the context window {}",
                corpus.len(),
                lm.m
            )));
        }
        for &t in corpus {
            lm.vocab.check(t)?;
        }
        let mut trace = vec![lm.cross_entropy(corpus)?];
        let mut positions: Vec<usize> = (1..corpus.len()).collect();
        for epoch in 0..config.epochs {
            let mut rng = rng::substream(config.seed, "lm-shuffle", epoch as u64);
            positions.shuffle(&mut rng);
            for &t in &positions {
                let window = lm.window(&corpus[..t])?;
                lm.sgd_step(&window, corpus[t], config.learning_rate);
            }
            trace.push(lm.cross_entropy(corpus)?);
        }
        Ok((lm, TrainTrace { cross_entropy: trace }))
    }

    fn sgd_step(&mut self, window: &[TokenId], target: TokenId, lr: f64) {
        let d = self.d;
        let x = self.input(window);
        let h = self.hidden(&x);
        let mut grad_logits: Vec<f64> = self.log_softmax(&h).iter().map(|lp| lp.exp()).collect();
        grad_logits[target as usize] -= 1.0;

        // Backprop into the hidden layer before touching the output weights.
        let mut grad_z = vec![0.0f64; d];
        for (y, &g) in grad_logits.iter().enumerate() {
            let row = &self.w_out[y * d..(y + 1) * d];
            for (gz, &w) in grad_z.iter_mut().zip(row) {
                *gz += g * f64::from(w);
            }
        }
        for (gz, &hi) in grad_z.iter_mut().zip(&h) {
            *gz *= 1.0 - hi * hi;
        }

        for (y, &g) in grad_logits.iter().enumerate() {
            let row = &mut self.w_out[y * d..(y + 1) * d];
            for (w, &hi) in row.iter_mut().zip(&h) {
                *w = (f64::from(*w) - lr * g * hi) as f32;
            }
            self.b_out[y] = (f64::from(self.b_out[y]) - lr * g) as f32;
        }

        let width = x.len();
        let mut grad_x = vec![0.0f64; width];
        for (i, &gz) in grad_z.iter().enumerate() {
            let row = &mut self.w_hidden[i * width..(i + 1) * width];
            for ((w, &xi), gx) in row.iter_mut().zip(&x).zip(grad_x.iter_mut()) {
                *gx += gz * f64::from(*w);
                *w = (f64::from(*w) - lr * gz * xi) as f32;
            }
            self.b_hidden[i] = (f64::from(self.b_hidden[i]) - lr * gz) as f32;
        }
        for (slot, &t) in window.iter().enumerate() {
            let row = &mut self.embed[t as usize * d..(t as usize + 1) * d];
            for (e, &g) in row.iter_mut().zip(&grad_x[slot * d..(slot + 1) * d]) {
                *e = (f64::from(*e) - lr * g) as f32;
            }
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(LM_MAGIC);
        w.u32(self.vocab.len() as u32);
        w.u32(self.d as u32);
        w.u32(self.m as u32);
        for tensor in [
            &self.embed,
            &self.w_hidden,
            &self.b_hidden,
            &self.w_out,
            &self.b_out,
        ] {
            w.f32s(tensor);
        }
        for t in self.vocab.tokens() {
            w.str(t);
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(LM_MAGIC)?;
        let v = r.u32()? as usize;
        let d = r.u32()? as usize;
        let m = r.u32()? as usize;
        if v == 0 || d < 2 || m < 1 {
            return Err(Error::corrupt("invalid LM header"));
        }
        let params = v
            .checked_mul(d)
            .and_then(|vd| vd.checked_mul(2))
            .and_then(|x| x.checked_add(d.checked_mul(m)?.checked_mul(d)?))
            .and_then(|x| x.checked_add(d + v))
            .ok_or_else(|| Error::corrupt("LM header overflow"))?;
        if params.saturating_mul(4) > r.remaining() {
            return Err(Error::corrupt("truncated"));
        }
        let embed = r.f32s(v * d)?;
        let w_hidden = r.f32s(d * m * d)?;
        let b_hidden = r.f32s(d)?;
        let w_out = r.f32s(v * d)?;
        let b_out = r.f32s(v)?;
        let tokens = (0..v).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
        r.finish()?;
        let vocab = Vocabulary::from_tokens(tokens)
            .map_err(|e| Error::corrupt(format!("vocabulary: {e}")))?;
        Ok(Self {
            vocab,
            d,
            m,
            embed,
            w_hidden,
            b_hidden,
            w_out,
            b_out,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// f32 weights against f64 activations, four accumulators.
#[inline]
fn dot_mixed(w: &[f32], x: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (cw, cx) = (w.chunks_exact(4), x.chunks_exact(4));
    let (rw, rx) = (cw.remainder(), cx.remainder());
    for (a, b) in cw.zip(cx) {
        for i in 0..4 {
            acc[i] += f64::from(a[i]) * b[i];
        }
    }
    let tail: f64 = rw.iter().zip(rx).map(|(&a, &b)| f64::from(a) * b).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub(crate) fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&z| z - lse).collect()
}

/// Anything that can assign a next-token distribution to a leftward context.
pub trait ProbabilitySource: Sync {
    fn vocab_size(&self) -> usize;

    fn distribution(&self, context: &[TokenId]) -> Result<Distribution>;

    fn log_prob(&self, context: &[TokenId], target: TokenId) -> Result<f64> {
        let dist = self.distribution(context)?;
        let p = dist
            .probs()
            .get(target as usize)
            .copied()
            .ok_or(Error::TokenOutOfRange {
                id: target,
                vocab_size: dist.len(),
            })?;
        Ok(p.ln())
    }
}

impl ProbabilitySource for ReferenceLm {
    fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn distribution(&self, context: &[TokenId]) -> Result<Distribution> {
        Ok(self.forward(context)?.distribution())
    }

    fn log_prob(&self, context: &[TokenId], target: TokenId) -> Result<f64> {
        self.vocab.check(target)?;
        Ok(self.forward(context)?.log_probs[target as usize])
    }
}

/// Per-position log-probabilities of `tokens[t]` given `tokens[..t]`, `t >= 1`.
pub fn position_log_probs<P: ProbabilitySource + ?Sized>(
    model: &P,
    tokens: &[TokenId],
) -> Result<Vec<f64>> {
    if tokens.len() < 2 {
        return Err(Error::invalid("sequence has no positions after warm-up"));
    }
    (1..tokens.len())
        .into_par_iter()
        .map(|t| model.log_prob(&tokens[..t], tokens[t]))
        .collect()
}

/// `exp` of the mean negative log-probability of every token after the first.
pub fn perplexity<P: ProbabilitySource + ?Sized>(model: &P, test: &[TokenId]) -> Result<f64> {
    let lps = position_log_probs(model, test)?;
    let mut nll = 0.0;
    for lp in &lps {
        if !lp.is_finite() {
            return Err(Error::DegenerateDistribution);
        }
        nll -= lp;
    }
    Ok((nll / lps.len() as f64).exp())
}

/// Fraction of positions whose argmax (lowest id on ties) is the gold token.
pub fn next_word_accuracy<P: ProbabilitySource + ?Sized>(model: &P, test: &[TokenId]) -> Result<f64> {
    if test.len() < 2 {
        return Err(Error::invalid("sequence has no positions after warm-up"));
    }
    let hits: Vec<bool> = (1..test.len())
        .into_par_iter()
        .map(|t| {
            let dist = model.distribution(&test[..t])?;
            if dist.probs().iter().any(|p| !p.is_finite()) {
                return Err(Error::DegenerateDistribution);
            }
            Ok(dist.argmax() == test[t])
        })
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
}
