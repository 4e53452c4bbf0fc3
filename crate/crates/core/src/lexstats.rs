//! Streaming unigram frequencies and distinct-successor counts over all
//! training tokens.

use std::collections::BTreeSet;

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::vocab::TokenId;

const LEX_MAGIC: &[u8] = b"SEMLEX1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LexStats {
    freq: Vec<u64>,
    successors: Vec<BTreeSet<TokenId>>,
}

impl LexStats {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            freq: vec![0; vocab_size],
            successors: vec![BTreeSet::new(); vocab_size],
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.freq.len()
    }

    fn check(&self, id: TokenId) -> Result<()> {
        if (id as usize) < self.freq.len() {
            Ok(())
        } else {
            Err(Error::TokenOutOfRange {
                id,
                vocab_size: self.freq.len(),
            })
        }
    }

    /// Records that `next` followed `prev`.
    pub fn update(&mut self, prev: TokenId, next: TokenId) -> Result<()> {
        self.check(prev)?;
        self.check(next)?;
        self.freq[prev as usize] += 1;
        self.successors[prev as usize].insert(next);
        Ok(())
    }

    /// Feeds every adjacent pair of a sequence.
    pub fn update_sequence(&mut self, tokens: &[TokenId]) -> Result<()> {
        for w in tokens.windows(2) {
            self.update(w[0], w[1])?;
        }
        Ok(())
    }

    pub fn freq(&self, t: TokenId) -> u64 {
        self.freq.get(t as usize).copied().unwrap_or(0)
    }

    pub fn distinct(&self, t: TokenId) -> usize {
        self.successors.get(t as usize).map_or(0, BTreeSet::len)
    }

    /// `ln(1 + freq)`; unseen tokens give 0.
    pub fn log_freq(&self, t: TokenId) -> f64 {
        (self.freq(t) as f64).ln_1p()
    }

    /// `ln(1 + distinct successors)`.
    pub fn log_distinct(&self, t: TokenId) -> f64 {
        (self.distinct(t) as f64).ln_1p()
    }

    pub fn total(&self) -> u64 {
        self.freq.iter().sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(LEX_MAGIC);
        w.u32(self.freq.len() as u32);
        for &f in &self.freq {
            w.u64(f);
        }
        for set in &self.successors {
            w.u32(set.len() as u32);
            for &s in set {
                w.u32(s);
            }
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(LEX_MAGIC)?;
        let raw = u64::from(r.u32()?);
        let v = r.count(raw, 12)?;
        let freq = (0..v).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let mut successors = Vec::with_capacity(v);
        for _ in 0..v {
            let raw = u64::from(r.u32()?);
            let n = r.count(raw, 4)?;
            let set = (0..n).map(|_| r.u32()).collect::<Result<BTreeSet<_>>>()?;
            if set.len() != n || set.iter().any(|&s| s as usize >= v) {
                return Err(Error::corrupt("invalid successor set"));
            }
            successors.push(set);
        }
        r.finish()?;
        Ok(Self { freq, successors })
    }
}
