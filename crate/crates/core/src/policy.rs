//! Memorization policies: selective (threshold on the full model's
//! log-probability of the gold token), full, and uniformly random.

use std::fmt;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::lexstats::LexStats;
use crate::lm::ReferenceLm;
use crate::memory::Memory;
use crate::model::{Lambda, Retrieval, Semiparametric};
use crate::rng::Rng;
use crate::vocab::TokenId;

/// Threshold in nats. Negative infinity never memorizes.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct MemorizationThreshold(f64);

impl MemorizationThreshold {
    pub const DEFAULT: f64 = -1.5;

    pub fn new(delta: f64) -> Result<Self> {
        if delta.is_nan() || delta == f64::INFINITY {
            return Err(Error::invalid(format!("invalid threshold {delta}")));
        }
        Ok(Self(delta))
    }

    pub fn never() -> Self {
        Self(f64::NEG_INFINITY)
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl Default for MemorizationThreshold {
    fn default() -> Self {
        Self(Self::DEFAULT)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Memorize,
    Skip,
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Decision::Memorize => "memorize",
            Decision::Skip => "skip",
        })
    }
}

/// Memorize iff `log_p_full < delta` (strictly).
pub fn decide(log_p_full: f64, delta: MemorizationThreshold) -> Result<Decision> {
    if !(log_p_full <= 0.0) {
        return Err(Error::NotLogProbability(log_p_full));
    }
    Ok(if log_p_full < delta.0 {
        Decision::Memorize
    } else {
        Decision::Skip
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct BatchStats {
    pub batch_id: u64,
    pub seen: u64,
    pub memorized: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PolicyStats {
    pub seen: u64,
    pub memorized: u64,
    pub per_batch: Vec<BatchStats>,
}

impl PolicyStats {
    pub fn record(&mut self, batch_id: u64, decision: Decision) {
        let memorized = u64::from(decision == Decision::Memorize);
        self.seen += 1;
        self.memorized += memorized;
        match self.per_batch.last_mut() {
            Some(b) if b.batch_id == batch_id => {
                b.seen += 1;
                b.memorized += memorized;
            }
            _ => self.per_batch.push(BatchStats {
                batch_id,
                seen: 1,
                memorized,
            }),
        }
    }

    pub fn batch(&self, batch_id: u64) -> Option<&BatchStats> {
        self.per_batch.iter().find(|b| b.batch_id == batch_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RateScope {
    Total,
    Batch(u64),
}

pub fn memorization_rate(stats: &PolicyStats, scope: RateScope) -> Result<f64> {
    let (seen, memorized) = match scope {
        RateScope::Total => (stats.seen, stats.memorized),
        RateScope::Batch(id) => stats
            .batch(id)
            .map(|b| (b.seen, b.memorized))
            .unwrap_or((0, 0)),
    };
    if seen == 0 {
        return Err(Error::invalid("no tokens seen in scope"));
    }
    Ok(memorized as f64 / seen as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Policy {
    Full,
    Random { p: f64 },
    Selective(MemorizationThreshold),
}

impl Policy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Policy::Random { p } if !(0.0..=1.0).contains(&p) => {
                Err(Error::invalid(format!("memorization probability {p} outside [0, 1]")))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Policy::Full => write!(f, "full"),
            Policy::Random { p } => write!(f, "random({p})"),
            Policy::Selective(d) => write!(f, "semem({})", d.get()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecisionRecord {
    pub batch_id: u64,
    pub position: usize,
    /// Absent for policies that never consult the model.
    pub log_p_full: Option<f64>,
    pub decision: Decision,
}

impl DecisionRecord {
    /// `batch_id,position,log_p_full,decision`
    pub fn csv_line(&self) -> String {
        let lp = self.log_p_full.map(|v| v.to_string()).unwrap_or_default();
        format!("{},{},{},{}", self.batch_id, self.position, lp, self.decision)
    }
}

/// What the policies need from the model besides memory and lexical stats.
#[derive(Clone, Copy)]
pub struct Learner<'a> {
    pub lm: &'a ReferenceLm,
    pub lambda: Lambda<'a>,
    pub retrieval: Retrieval,
}

/// One stream position: predict `target` from `context`.
#[derive(Debug, Clone, Copy)]
pub struct Step<'t> {
    pub context: &'t [TokenId],
    pub target: TokenId,
    pub batch_id: u64,
    pub position: usize,
}

/// Scores the gold token under the full model and memorizes it when the
/// log-probability falls below `delta`. A memorized row is visible to the
/// very next call.
pub fn process_token(
    learner: &Learner<'_>,
    memory: &mut Memory,
    lexstats: &LexStats,
    step: Step<'_>,
    delta: MemorizationThreshold,
    stats: &mut PolicyStats,
) -> Result<DecisionRecord> {
    learner.lm.vocab().check(step.target)?;
    let model = Semiparametric {
        lm: learner.lm,
        memory,
        lexstats,
        lambda: learner.lambda,
        retrieval: learner.retrieval,
    };
    let pred = model.predict(step.context)?;
    let p = pred.probs.prob(step.target);
    let log_p = p.ln();
    let decision = decide(log_p, delta)?;
    if decision == Decision::Memorize {
        memory.append(&pred.lm.hidden, step.target)?;
    }
    stats.record(step.batch_id, decision);
    Ok(DecisionRecord {
        batch_id: step.batch_id,
        position: step.position,
        log_p_full: Some(log_p),
        decision,
    })
}

/// Memorizes each position of `tokens` independently with probability `p`.
pub fn random_memorization(
    lm: &ReferenceLm,
    memory: &mut Memory,
    tokens: &[TokenId],
    p: f64,
    rng: &mut Rng,
    batch_id: u64,
    stats: &mut PolicyStats,
) -> Result<Vec<DecisionRecord>> {
    Policy::Random { p }.validate()?;
    let mut records = Vec::with_capacity(tokens.len().saturating_sub(1));
    for t in 1..tokens.len() {
        let decision = if rng.random_bool(p) {
            let out = lm.forward(&tokens[..t])?;
            memory.append(&out.hidden, tokens[t])?;
            Decision::Memorize
        } else {
            Decision::Skip
        };
        stats.record(batch_id, decision);
        records.push(DecisionRecord {
            batch_id,
            position: t,
            log_p_full: None,
            decision,
        });
    }
    Ok(records)
}

/// Streams one training sequence through `policy`, updating lexical
/// statistics with every pair whether memorized or not.
#[allow(clippy::too_many_arguments)]
pub fn stream_sequence(
    policy: Policy,
    learner: &Learner<'_>,
    memory: &mut Memory,
    lexstats: &mut LexStats,
    tokens: &[TokenId],
    batch_id: u64,
    rng: &mut Rng,
    stats: &mut PolicyStats,
) -> Result<Vec<DecisionRecord>> {
    policy.validate()?;
    let mut records = Vec::with_capacity(tokens.len().saturating_sub(1));
    match policy {
        Policy::Random { p } => {
            records = random_memorization(learner.lm, memory, tokens, p, rng, batch_id, stats)?;
            lexstats.update_sequence(tokens)?;
        }
        Policy::Full => {
            for t in 1..tokens.len() {
                let out = learner.lm.forward(&tokens[..t])?;
                memory.append(&out.hidden, tokens[t])?;
                stats.record(batch_id, Decision::Memorize);
                lexstats.update(tokens[t - 1], tokens[t])?;
                records.push(DecisionRecord {
                    batch_id,
                    position: t,
                    log_p_full: None,
                    decision: Decision::Memorize,
                });
            }
        }
        Policy::Selective(delta) => {
            for t in 1..tokens.len() {
                let step = Step {
                    context: &tokens[..t],
                    target: tokens[t],
                    batch_id,
                    position: t,
                };
                records.push(process_token(learner, memory, lexstats, step, delta, stats)?);
                lexstats.update(tokens[t - 1], tokens[t])?;
            }
        }
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knn::InterpolationWeight;
    use crate::lm::RefLmConfig;
    use crate::vocab::Vocabulary;
    use proptest::prelude::*;

    fn th(d: f64) -> MemorizationThreshold {
        MemorizationThreshold::new(d).unwrap()
    }

    #[test]
    fn decision_examples() {
        assert_eq!(decide(-2.0, th(-1.5)).unwrap(), Decision::Memorize);
        assert_eq!(decide(-1.0, th(-1.5)).unwrap(), Decision::Skip);
        assert_eq!(decide(-1.5, th(-1.5)).unwrap(), Decision::Skip);
        assert_eq!(decide(-1e-300, th(0.0)).unwrap(), Decision::Memorize);
        assert_eq!(decide(-50.0, MemorizationThreshold::never()).unwrap(), Decision::Skip);
        let err = decide(0.1, th(-1.5)).unwrap_err();
        assert!(err.to_string().starts_with("not a log-probability"));
        assert!(decide(f64::NAN, th(-1.5)).is_err());
        assert!(MemorizationThreshold::new(f64::NAN).is_err());
    }

    #[test]
    fn rates_by_scope() {
        let mut s = PolicyStats::default();
        s.record(0, Decision::Memorize);
        s.record(0, Decision::Skip);
        s.record(1, Decision::Skip);
        assert_eq!(memorization_rate(&s, RateScope::Total).unwrap(), 1.0 / 3.0);
        assert_eq!(memorization_rate(&s, RateScope::Batch(0)).unwrap(), 0.5);
        assert_eq!(memorization_rate(&s, RateScope::Batch(1)).unwrap(), 0.0);
        assert!(memorization_rate(&s, RateScope::Batch(2)).is_err());
        assert!(memorization_rate(&PolicyStats::default(), RateScope::Total).is_err());
        let seen: u64 = s.per_batch.iter().map(|b| b.seen).sum();
        assert_eq!(seen, s.seen);
    }

    fn tiny_lm() -> ReferenceLm {
        let toks: Vec<String> = "a b c d e f".split(' ').map(String::from).collect();
        let vocab = Vocabulary::build(&toks, 10).unwrap();
        let mut lm = ReferenceLm::new(vocab, &RefLmConfig { d: 4, m: 2, ..Default::default() }).unwrap();
        lm.zero_output_layer();
        lm
    }

    fn learner(lm: &ReferenceLm, lambda: f64) -> Learner<'_> {
        Learner {
            lm,
            lambda: Lambda::Constant(InterpolationWeight::new(lambda).unwrap()),
            retrieval: Retrieval { k: 8, nprobe: 1 },
        }
    }

    #[test]
    fn empty_memory_falls_back_to_parametric_probability() {
        // Uniform over 7 tokens: log p = -ln 7 = -1.95 < -1.5.
        let lm = tiny_lm();
        let mut mem = Memory::new(4);
        let mut stats = PolicyStats::default();
        let step = Step { context: &[1, 2], target: 3, batch_id: 0, position: 2 };
        let rec = process_token(&learner(&lm, 0.25), &mut mem, &LexStats::new(7), step, th(-1.5), &mut stats).unwrap();
        assert_eq!(rec.decision, Decision::Memorize);
        assert!((rec.log_p_full.unwrap() + 7f64.ln()).abs() < 1e-12);
        assert_eq!(mem.len(), 1);
        assert_eq!(stats.memorized, 1);
    }

    #[test]
    fn memorized_context_is_skipped_next_time() {
        let lm = tiny_lm();
        let mut mem = Memory::new(4);
        let mut stats = PolicyStats::default();
        let l = learner(&lm, 0.5);
        let step = Step { context: &[1, 2], target: 3, batch_id: 0, position: 2 };
        let lex = LexStats::new(7);
        process_token(&l, &mut mem, &lex, step, th(-1.5), &mut stats).unwrap();
        let rec = process_token(&l, &mut mem, &lex, step, th(-1.5), &mut stats).unwrap();
        // 0.5/7 + 0.5 * 1
        assert!((rec.log_p_full.unwrap() - (0.5 / 7.0 + 0.5f64).ln()).abs() < 1e-12);
        assert_eq!(rec.decision, Decision::Skip);
    }

    #[test]
    fn never_threshold_leaves_memory_empty() {
        let lm = tiny_lm();
        let mut mem = Memory::new(4);
        let mut lex = LexStats::new(7);
        let mut stats = PolicyStats::default();
        let tokens: Vec<TokenId> = (0..200).map(|i| (i * 7 % 6 + 1) as TokenId).collect();
        let mut rng = crate::rng::substream(0, "t", 0);
        stream_sequence(
            Policy::Selective(MemorizationThreshold::never()),
            &learner(&lm, 0.25), &mut mem, &mut lex, &tokens, 0, &mut rng, &mut stats,
        )
        .unwrap();
        assert!(mem.is_empty());
        assert_eq!(stats.seen, 199);
        assert_eq!(memorization_rate(&stats, RateScope::Total).unwrap(), 0.0);
        assert_eq!(lex.total(), 199);
    }

    #[test]
    fn random_policy_edges() {
        let lm = tiny_lm();
        let tokens: Vec<TokenId> = (0..300).map(|i| (i % 6 + 1) as TokenId).collect();
        for (p, rows) in [(0.0, 0), (1.0, 299)] {
            let mut mem = Memory::new(4);
            let mut stats = PolicyStats::default();
            let mut rng = crate::rng::substream(1, "r", 0);
            random_memorization(&lm, &mut mem, &tokens, p, &mut rng, 0, &mut stats).unwrap();
            assert_eq!(mem.len(), rows);
            assert_eq!(stats.memorized as usize, rows);
        }
        let mut rng = crate::rng::substream(1, "r", 0);
        assert!(random_memorization(&lm, &mut Memory::new(4), &tokens, 1.2, &mut rng, 0, &mut PolicyStats::default()).is_err());
    }

    #[test]
    fn decision_log_format() {
        let r = DecisionRecord { batch_id: 3, position: 7, log_p_full: Some(-2.5), decision: Decision::Memorize };
        assert_eq!(r.csv_line(), "3,7,-2.5,memorize");
        let r = DecisionRecord { log_p_full: None, decision: Decision::Skip, ..r };
        assert_eq!(r.csv_line(), "3,7,,skip");
    }

    proptest! {
        #[test]
        fn memorized_sets_are_nested_in_delta(
            log_ps in prop::collection::vec(-8.0f64..0.0, 1..100),
            a in -6.0f64..0.0, b in -6.0f64..0.0,
        ) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            for lp in log_ps {
                if decide(lp, th(lo)).unwrap() == Decision::Memorize {
                    prop_assert_eq!(decide(lp, th(hi)).unwrap(), Decision::Memorize);
                }
            }
        }
    }
}
