//! Selective memorization for streaming semiparametric language models.

pub mod calibrator;
mod codec;
pub mod error;
pub mod harness;
pub mod knn;
pub mod lexstats;
pub mod lm;
pub mod memory;
pub mod model;
pub mod policy;
pub mod rng;
pub mod synth;
pub mod vocab;

pub use error::{Error, ErrorKind, Result};
pub use harness::{run_cl, ContinualRun, EvalSet, LambdaMode, RunConfig, RunReport, RunState, StreamBatch};
pub use knn::{Distribution, InterpolationWeight};
pub use lm::{ContextRep, ProbabilitySource, RefLmConfig, ReferenceLm};
pub use memory::{IndexParams, Memory, Neighbor};
pub use model::{Lambda, Retrieval, Semiparametric};
pub use policy::{Decision, MemorizationThreshold, Policy};
pub use vocab::{TokenId, Vocabulary};
