//! Output vocabulary and whitespace tokenization.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const UNK_ID: TokenId = 0;
pub const UNK_TOKEN: &str = "<unk>";

/// Splits on whitespace and lowercases.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Token strings with `<unk>` reserved at id 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Keeps `<unk>` plus the `max_size - 1` most frequent types; ties go to
    /// whichever type occurred first.
    pub fn build<I, S>(corpus: I, max_size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        if max_size < 2 {
            return Err(Error::invalid("max_size must be at least 2"));
        }
        // (count, first occurrence)
        let mut counts: HashMap<String, (u64, usize)> = HashMap::new();
        let mut total = 0usize;
        for tok in corpus {
            let tok = tok.as_ref();
            let order = counts.len();
            total += 1;
            if tok == UNK_TOKEN {
                continue;
            }
            counts.entry(tok.to_owned()).or_insert((0, order)).0 += 1;
        }
        if total == 0 {
            return Err(Error::EmptyCorpus);
        }
        let mut ranked: Vec<(String, u64, usize)> =
            counts.into_iter().map(|(t, (c, o))| (t, c, o)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
        ranked.truncate(max_size - 1);

        let tokens = std::iter::once(UNK_TOKEN.to_owned())
            .chain(ranked.into_iter().map(|(t, _, _)| t))
            .collect();
        Self::from_tokens(tokens)
    }

    /// Rebuilds a vocabulary from its id-ordered token list; index 0 must be `<unk>`.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(UNK_TOKEN) {
            return Err(Error::invalid("vocabulary must start with <unk>"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::invalid(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<TokenId> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn check(&self, id: TokenId) -> Result<()> {
        if (id as usize) < self.len() {
            Ok(())
        } else {
            Err(Error::TokenOutOfRange {
                id,
                vocab_size: self.len(),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn frequency_order() {
        let v = Vocabulary::build(tokenize("a b a"), 3).unwrap();
        assert_eq!(v.tokens(), &["<unk>", "a", "b"]);
    }

    #[test]
    fn ties_follow_first_occurrence() {
        let v = Vocabulary::build(tokenize("a b c"), 2).unwrap();
        assert_eq!(v.tokens(), &["<unk>", "a"]);
        let v = Vocabulary::build(tokenize("c b a b c"), 3).unwrap();
        assert_eq!(v.tokens(), &["<unk>", "c", "b"]);
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let err = Vocabulary::build(Vec::<String>::new(), 4).unwrap_err();
        assert_eq!(err.to_string(), "empty corpus");
    }

    #[test]
    fn lookup_round_trips_and_unknowns_map_to_unk() {
        let v = Vocabulary::build(tokenize("The cat the DOG"), 10).unwrap();
        for (i, t) in v.tokens().iter().enumerate() {
            assert_eq!(v.id(t), i as TokenId);
            assert_eq!(v.token(i as TokenId), Some(t.as_str()));
        }
        assert_eq!(v.id("zebra"), UNK_ID);
        assert_eq!(v.id("the"), 1);
    }

    #[test]
    fn unk_rate_equals_excluded_mass() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let corpus: Vec<String> = (0..10_000)
            .map(|_| {
                // roughly Zipfian over 2000 types
                let r: f64 = rng.random();
                format!("t{}", (2000f64.powf(r) as usize).saturating_sub(1))
            })
            .collect();
        let v = Vocabulary::build(&corpus, 500).unwrap();
        assert_eq!(v.len(), 500);

        // Independent tally: sort types by (count desc, first seen asc).
        let mut first = Vec::<String>::new();
        let mut count = HashMap::<&str, usize>::new();
        for t in &corpus {
            let c = count.entry(t.as_str()).or_insert(0);
            if *c == 0 {
                first.push(t.clone());
            }
            *c += 1;
        }
        let mut types: Vec<(usize, usize, &str)> = first
            .iter()
            .enumerate()
            .map(|(i, t)| (count[t.as_str()], i, t.as_str()))
            .collect();
        types.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        let excluded: usize = types[499..].iter().map(|t| t.0).sum();

        let unk = corpus.iter().filter(|t| v.id(t) == UNK_ID).count();
        assert_eq!(unk, excluded);
    }
}
