//! The semiparametric model: parametric LM, memory retrieval and an
//! interpolation weight that is either constant or predicted per query.

use serde::{Deserialize, Serialize};

use crate::calibrator::{extract_features, CalibratorTrainExample, CalibratorWeights};
use crate::error::{Error, Result};
use crate::knn::{interpolate, knn_distribution, Distribution, InterpolationWeight};
use crate::lexstats::LexStats;
use crate::lm::{LmOutput, ProbabilitySource, ReferenceLm};
use crate::memory::{Memory, Neighbor};
use crate::vocab::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Retrieval {
    pub k: usize,
    pub nprobe: usize,
}

impl Default for Retrieval {
    fn default() -> Self {
        Self { k: 64, nprobe: 8 }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Lambda<'a> {
    Constant(InterpolationWeight),
    Calibrated(&'a CalibratorWeights),
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub lm: LmOutput,
    pub neighbors: Vec<Neighbor>,
    pub p_mem: Option<Distribution>,
    /// The weight actually applied; 0 when memory returned nothing.
    pub lambda: f64,
    pub probs: Distribution,
}

#[derive(Clone, Copy)]
pub struct Semiparametric<'a> {
    pub lm: &'a ReferenceLm,
    pub memory: &'a Memory,
    pub lexstats: &'a LexStats,
    pub lambda: Lambda<'a>,
    pub retrieval: Retrieval,
}

impl<'a> Semiparametric<'a> {
    fn retrieve(&self, out: &LmOutput) -> Result<(Vec<Neighbor>, Option<Distribution>)> {
        let neighbors = self
            .memory
            .search(&out.hidden, self.retrieval.k, self.retrieval.nprobe)?;
        let p_mem = knn_distribution(&neighbors, self.lm.vocab_size())?;
        Ok((neighbors, p_mem))
    }

    pub fn predict(&self, context: &[TokenId]) -> Result<Prediction> {
        let out = self.lm.forward(context)?;
        let (neighbors, p_mem) = self.retrieve(&out)?;
        let p_lm = out.distribution();
        let lambda = match (&p_mem, self.lambda) {
            (None, _) => 0.0,
            (Some(_), Lambda::Constant(w)) => w.get(),
            (Some(_), Lambda::Calibrated(cal)) => {
                let last = *context.last().expect("forward rejects empty contexts");
                cal.predict_lambda(&extract_features(&out, &neighbors, self.lexstats, last))?
            }
        };
        let probs = interpolate(&p_lm, p_mem.as_ref(), InterpolationWeight::new(lambda)?)?;
        Ok(Prediction {
            lm: out,
            neighbors,
            p_mem,
            lambda,
            probs,
        })
    }

    /// One calibrator training example for predicting `target`, or `None`
    /// when memory returned nothing (lambda would have no effect).
    pub fn calibration_example(
        &self,
        context: &[TokenId],
        target: TokenId,
    ) -> Result<Option<CalibratorTrainExample>> {
        self.lm.vocab().check(target)?;
        let out = self.lm.forward(context)?;
        let (neighbors, p_mem) = self.retrieve(&out)?;
        let Some(p_mem) = p_mem else {
            return Ok(None);
        };
        let last = *context.last().expect("forward rejects empty contexts");
        Ok(Some(CalibratorTrainExample {
            p_lm_gold: out.log_probs[target as usize].exp(),
            p_mem_gold: p_mem.prob(target),
            features: extract_features(&out, &neighbors, self.lexstats, last),
        }))
    }
}

impl ProbabilitySource for Semiparametric<'_> {
    fn vocab_size(&self) -> usize {
        self.lm.vocab_size()
    }

    fn distribution(&self, context: &[TokenId]) -> Result<Distribution> {
        Ok(self.predict(context)?.probs)
    }
}

/// The memory distribution alone; contexts with no neighbors are an error.
#[derive(Clone, Copy)]
pub struct MemoryOnly<'a> {
    pub lm: &'a ReferenceLm,
    pub memory: &'a Memory,
    pub retrieval: Retrieval,
}

impl ProbabilitySource for MemoryOnly<'_> {
    fn vocab_size(&self) -> usize {
        self.lm.vocab_size()
    }

    fn distribution(&self, context: &[TokenId]) -> Result<Distribution> {
        let out = self.lm.forward(context)?;
        let neighbors = self
            .memory
            .search(&out.hidden, self.retrieval.k, self.retrieval.nprobe)?;
        knn_distribution(&neighbors, self.lm.vocab_size())?.ok_or(Error::DegenerateDistribution)
    }
}
