//! Next-token distributions: the kNN aggregation over retrieved neighbors and
//! its linear interpolation with the parametric distribution.

use crate::error::{Error, Result};
use crate::memory::Neighbor;
use crate::vocab::TokenId;

/// A probability vector over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    probs: Vec<f64>,
}

impl Distribution {
    /// Validates non-negativity and that the entries sum to 1 within 1e-6.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::invalid("empty distribution"));
        }
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::DegenerateDistribution);
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::DegenerateDistribution);
        }
        Ok(Self { probs })
    }

    pub fn uniform(vocab_size: usize) -> Self {
        Self {
            probs: vec![1.0 / vocab_size as f64; vocab_size],
        }
    }

    pub(crate) fn from_log_probs(log_probs: &[f64]) -> Self {
        Self {
            probs: log_probs.iter().map(|lp| lp.exp()).collect(),
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, y: TokenId) -> f64 {
        self.probs[y as usize]
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Highest-probability token; ties resolve to the lowest id.
    pub fn argmax(&self) -> TokenId {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best as TokenId
    }

    /// Max probability.
    pub fn confidence(&self) -> f64 {
        self.probs.iter().copied().fold(0.0, f64::max)
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        -self
            .probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>()
    }
}

/// Weight on the memory distribution.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct InterpolationWeight(f64);

impl InterpolationWeight {
    pub fn new(lambda: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&lambda) {
            Ok(Self(lambda))
        } else {
            Err(Error::invalid(format!("lambda {lambda} outside [0, 1]")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// Aggregates `exp(-dist)` per retrieved value. Returns `None` when there are
/// no neighbors.
pub fn knn_distribution(neighbors: &[Neighbor], vocab_size: usize) -> Result<Option<Distribution>> {
    if vocab_size == 0 {
        return Err(Error::invalid("vocabulary size must be positive"));
    }
    let mut min = f64::INFINITY;
    for n in neighbors {
        if !(n.dist >= 0.0) || n.dist.is_infinite() {
            return Err(Error::InvalidDistance(n.dist));
        }
        if n.value as usize >= vocab_size {
            return Err(Error::TokenOutOfRange {
                id: n.value,
                vocab_size,
            });
        }
        min = min.min(n.dist);
    }
    if neighbors.is_empty() {
        return Ok(None);
    }
    let mut probs = vec![0.0; vocab_size];
    for n in neighbors {
        probs[n.value as usize] += (min - n.dist).exp();
    }
    let total: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= total;
    }
    Ok(Some(Distribution { probs }))
}

/// `(1 - lambda) * p_lm + lambda * p_mem`; an absent memory distribution
/// returns `p_lm` unchanged.
pub fn interpolate(
    p_lm: &Distribution,
    p_mem: Option<&Distribution>,
    lambda: InterpolationWeight,
) -> Result<Distribution> {
    let Some(p_mem) = p_mem else {
        return Ok(p_lm.clone());
    };
    if p_mem.len() != p_lm.len() {
        return Err(Error::DimensionMismatch {
            expected: p_lm.len(),
            got: p_mem.len(),
        });
    }
    let l = lambda.get();
    let probs = p_lm
        .probs
        .iter()
        .zip(&p_mem.probs)
        .map(|(&a, &b)| (1.0 - l) * a + l * b)
        .collect();
    Ok(Distribution { probs })
}
