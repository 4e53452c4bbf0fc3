//! Continual learning over a chronological stream of batches: policy
//! streaming, per-batch calibration and index rebuild, evaluation, and
//! report export.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibrator::{self, epoch_schedule, CalibratorConfig, CalibratorTrainExample, CalibratorWeights};
use crate::error::{Error, Result};
use crate::knn::InterpolationWeight;
use crate::lexstats::LexStats;
use crate::lm::{ProbabilitySource, RefLmConfig, ReferenceLm};
use crate::memory::{IndexParams, Memory};
use crate::model::{Lambda, Retrieval, Semiparametric};
use crate::policy::{
    memorization_rate, stream_sequence, BatchStats, DecisionRecord, Learner, Policy, PolicyStats, RateScope,
};
use crate::rng::{derive_seed, substream};
use crate::vocab::{tokenize, TokenId, Vocabulary};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamBatch {
    pub batch_id: u64,
    pub train: Vec<TokenId>,
    pub valid: Vec<TokenId>,
    pub test: Vec<TokenId>,
    pub sources: Option<ManifestEntry>,
}

impl StreamBatch {
    pub fn new(batch_id: u64, train: Vec<TokenId>, valid: Vec<TokenId>, test: Vec<TokenId>) -> Self {
        Self {
            batch_id,
            train,
            valid,
            test,
            sources: None,
        }
    }
}

pub fn check_batches(batches: &[StreamBatch]) -> Result<()> {
    if batches.is_empty() {
        return Err(Error::invalid("stream has no batches"));
    }
    if batches.windows(2).any(|w| w[0].batch_id >= w[1].batch_id) {
        return Err(Error::invalid("batch ids must be strictly increasing"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalSet {
    pub name: String,
    pub tokens: Vec<TokenId>,
}

impl EvalSet {
    pub fn new(name: impl Into<String>, tokens: Vec<TokenId>) -> Self {
        Self {
            name: name.into(),
            tokens,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LambdaMode {
    Constant(f64),
    Calibrated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub policy: Policy,
    pub lambda_mode: LambdaMode,
    /// Weight used in calibrated mode until the first calibrator exists.
    pub fallback_lambda: f64,
    /// Whether SeMem decisions use the calibrated weight once available.
    pub calibrate_decisions: bool,
    pub retrieval: Retrieval,
    pub index: IndexParams,
    pub calibrator: CalibratorConfig,
    /// Prefix fraction of each validation split used for calibration.
    pub calibration_fraction: f64,
    /// Fraction of each validation split, taken right after the calibration
    /// prefix, used to select among the calibrator's epoch checkpoints.
    pub calibration_validation_fraction: f64,
    /// Evaluate after every `eval_every` batches and after the last one.
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            policy: Policy::Selective(Default::default()),
            lambda_mode: LambdaMode::Calibrated,
            fallback_lambda: 0.25,
            calibrate_decisions: true,
            retrieval: Retrieval::default(),
            index: IndexParams::default(),
            calibrator: CalibratorConfig::default(),
            calibration_fraction: 0.02,
            calibration_validation_fraction: 0.01,
            eval_every: 1,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.policy.validate()?;
        if let LambdaMode::Constant(l) = self.lambda_mode {
            InterpolationWeight::new(l)?;
        }
        InterpolationWeight::new(self.fallback_lambda)?;
        let (c, v) = (self.calibration_fraction, self.calibration_validation_fraction);
        if !(0.0..=1.0).contains(&c) || !(0.0..=1.0).contains(&v) || c + v > 1.0 {
            return Err(Error::invalid("calibration fractions must lie in [0, 1] and sum to at most 1"));
        }
        if self.eval_every == 0 || self.retrieval.k == 0 {
            return Err(Error::invalid("eval cadence and k must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrowthPoint {
    pub batch_id: u64,
    pub rows: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub memrate: Vec<BatchStats>,
    pub eval_sets: Vec<String>,
    /// Batch ids after which evaluation ran.
    pub checkpoints: Vec<u64>,
    /// `[eval_set][checkpoint]`.
    pub ppl: Vec<Vec<f64>>,
    pub accuracy: Vec<Vec<f64>>,
    pub growth: Vec<GrowthPoint>,
}

impl RunReport {
    pub fn rate(&self, batch_id: u64) -> Option<f64> {
        self.memrate
            .iter()
            .find(|b| b.batch_id == batch_id)
            .filter(|b| b.seen > 0)
            .map(|b| b.memorized as f64 / b.seen as f64)
    }

    pub fn total_rate(&self) -> Option<f64> {
        let seen: u64 = self.memrate.iter().map(|b| b.seen).sum();
        let mem: u64 = self.memrate.iter().map(|b| b.memorized).sum();
        (seen > 0).then(|| mem as f64 / seen as f64)
    }

    pub fn final_ppl(&self, eval_set: &str) -> Option<f64> {
        let i = self.eval_sets.iter().position(|s| s == eval_set)?;
        self.ppl[i].last().copied()
    }

    pub fn memrate_csv(&self) -> String {
        let mut s = String::from("batch_id,seen,memorized,rate\n");
        for b in &self.memrate {
            let rate = if b.seen == 0 { 0.0 } else { b.memorized as f64 / b.seen as f64 };
            s += &format!("{},{},{},{}\n", b.batch_id, b.seen, b.memorized, rate);
        }
        s
    }

    fn matrix_csv(&self, header: &str, m: &[Vec<f64>]) -> String {
        let mut s = format!("eval_set,checkpoint,{header}\n");
        for (name, row) in self.eval_sets.iter().zip(m) {
            for (cp, v) in self.checkpoints.iter().zip(row) {
                s += &format!("{name},{cp},{v}\n");
            }
        }
        s
    }

    pub fn ppl_csv(&self) -> String {
        self.matrix_csv("ppl", &self.ppl)
    }

    pub fn accuracy_csv(&self) -> String {
        self.matrix_csv("accuracy", &self.accuracy)
    }

    pub fn growth_csv(&self) -> String {
        let mut s = String::from("batch_id,rows,bytes\n");
        for g in &self.growth {
            s += &format!("{},{},{}\n", g.batch_id, g.rows, g.bytes);
        }
        s
    }

    /// Writes `memrate.csv`, `ppl_matrix.csv`, `accuracy_matrix.csv` and
    /// `growth.csv` into `dir`.
    pub fn write_csv(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join("memrate.csv"), self.memrate_csv())?;
        fs::write(dir.join("ppl_matrix.csv"), self.ppl_csv())?;
        fs::write(dir.join("accuracy_matrix.csv"), self.accuracy_csv())?;
        fs::write(dir.join("growth.csv"), self.growth_csv())?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForgettingRow {
    pub eval_set: String,
    pub min_ppl: f64,
    pub final_ppl: f64,
    /// `final - min`.
    pub delta: f64,
}

impl ForgettingRow {
    pub fn relative(&self) -> f64 {
        self.delta / self.min_ppl
    }
}

/// Final-checkpoint PPL minus the minimum reached, per eval set. Empty with
/// fewer than two checkpoints.
pub fn forgetting_matrix(report: &RunReport) -> Vec<ForgettingRow> {
    if report.checkpoints.len() < 2 {
        return Vec::new();
    }
    report
        .eval_sets
        .iter()
        .zip(&report.ppl)
        .map(|(name, row)| {
            let min_ppl = row.iter().copied().fold(f64::INFINITY, f64::min);
            let final_ppl = *row.last().unwrap();
            ForgettingRow {
                eval_set: name.clone(),
                min_ppl,
                final_ppl,
                delta: final_ppl - min_ppl,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub ppl: f64,
    pub accuracy: f64,
}

/// Perplexity and next-word accuracy from one pass over `tokens`.
pub fn evaluate<P: ProbabilitySource + ?Sized>(model: &P, tokens: &[TokenId]) -> Result<EvalResult> {
    if tokens.len() < 2 {
        return Err(Error::invalid("sequence has no positions after warm-up"));
    }
    let per: Vec<(f64, bool)> = (1..tokens.len())
        .into_par_iter()
        .map(|t| {
            let dist = model.distribution(&tokens[..t])?;
            let p = dist.prob(tokens[t]);
            if !(p > 0.0) || !p.is_finite() {
                return Err(Error::DegenerateDistribution);
            }
            Ok((p.ln(), dist.argmax() == tokens[t]))
        })
        .collect::<Result<_>>()?;
    let mut nll = 0.0;
    let mut hits = 0usize;
    for &(lp, hit) in &per {
        nll -= lp;
        hits += usize::from(hit);
    }
    let n = per.len() as f64;
    Ok(EvalResult {
        ppl: (nll / n).exp(),
        accuracy: hits as f64 / n,
    })
}

/// Mutable state carried across batches.
#[derive(Debug, Clone, PartialEq)]
pub struct RunState {
    pub memory: Memory,
    pub lexstats: LexStats,
    pub calibrator: Option<CalibratorWeights>,
    pub calibration_examples: Vec<CalibratorTrainExample>,
    pub calibration_validation: Vec<CalibratorTrainExample>,
    pub stats: PolicyStats,
    pub report: RunReport,
    /// Index into the batch list of the next batch to process.
    pub next_batch: usize,
}

#[derive(Serialize, Deserialize)]
struct StateFile {
    calibration_examples: Vec<CalibratorTrainExample>,
    calibration_validation: Vec<CalibratorTrainExample>,
    stats: PolicyStats,
    report: RunReport,
    next_batch: usize,
}

impl RunState {
    pub fn new(lm: &ReferenceLm, eval_sets: &[EvalSet]) -> Self {
        let report = RunReport {
            eval_sets: eval_sets.iter().map(|e| e.name.clone()).collect(),
            ppl: vec![Vec::new(); eval_sets.len()],
            accuracy: vec![Vec::new(); eval_sets.len()],
            ..Default::default()
        };
        Self {
            memory: Memory::new(lm.hidden_dim()),
            lexstats: LexStats::new(lm.vocab_size()),
            calibrator: None,
            calibration_examples: Vec::new(),
            calibration_validation: Vec::new(),
            stats: PolicyStats::default(),
            report,
            next_batch: 0,
        }
    }

    /// Writes `memory.bin`, `lexstats.bin`, `calibrator.bin` (when trained)
    /// and `state.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        self.memory.save(dir.join("memory.bin"))?;
        fs::write(dir.join("lexstats.bin"), self.lexstats.to_bytes())?;
        let cal = dir.join("calibrator.bin");
        match &self.calibrator {
            Some(c) => c.save(&cal)?,
            None if cal.exists() => fs::remove_file(&cal)?,
            None => {}
        }
        let state = StateFile {
            calibration_examples: self.calibration_examples.clone(),
            calibration_validation: self.calibration_validation.clone(),
            stats: self.stats.clone(),
            report: self.report.clone(),
            next_batch: self.next_batch,
        };
        let json = serde_json::to_vec(&state).map_err(|e| Error::invalid(e.to_string()))?;
        fs::write(dir.join("state.json"), json)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let memory = Memory::load(dir.join("memory.bin"))?;
        let lexstats = LexStats::from_bytes(&fs::read(dir.join("lexstats.bin"))?)?;
        let cal = dir.join("calibrator.bin");
        let calibrator = if cal.exists() {
            Some(CalibratorWeights::load(&cal)?)
        } else {
            None
        };
        let state: StateFile = serde_json::from_slice(&fs::read(dir.join("state.json"))?)
            .map_err(|e| Error::corrupt(format!("state.json: {e}")))?;
        Ok(Self {
            memory,
            lexstats,
            calibrator,
            calibration_examples: state.calibration_examples,
            calibration_validation: state.calibration_validation,
            stats: state.stats,
            report: state.report,
            next_batch: state.next_batch,
        })
    }
}

/// Step-wise continual-learning driver over a frozen LM.
pub struct ContinualRun<'a> {
    lm: &'a ReferenceLm,
    config: RunConfig,
    eval_sets: Vec<EvalSet>,
    state: RunState,
}

impl<'a> ContinualRun<'a> {
    pub fn new(lm: &'a ReferenceLm, config: RunConfig, eval_sets: Vec<EvalSet>) -> Result<Self> {
        let state = RunState::new(lm, &eval_sets);
        Self::resume(lm, config, eval_sets, state)
    }

    /// Continues from a saved state; eval-set names must match.
    pub fn resume(lm: &'a ReferenceLm, config: RunConfig, eval_sets: Vec<EvalSet>, state: RunState) -> Result<Self> {
        config.validate()?;
        let names: Vec<String> = eval_sets.iter().map(|e| e.name.clone()).collect();
        if names != state.report.eval_sets {
            return Err(Error::invalid("eval sets differ from the saved run"));
        }
        if state.memory.store().dim() != lm.hidden_dim() || state.lexstats.vocab_size() != lm.vocab_size() {
            return Err(Error::invalid("saved state does not match the language model"));
        }
        if let Some(c) = &state.calibrator {
            if c.hidden_dim() != lm.hidden_dim() {
                return Err(Error::invalid("calibrator does not match the language model"));
            }
        }
        for e in &eval_sets {
            check_tokens(lm, &e.tokens)?;
        }
        Ok(Self {
            lm,
            config,
            eval_sets,
            state,
        })
    }

    pub fn state(&self) -> &RunState {
        &self.state
    }

    pub fn into_state(self) -> RunState {
        self.state
    }

    pub fn report(&self) -> &RunReport {
        &self.state.report
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    fn lambda(&self, for_decisions: bool) -> Result<Lambda<'_>> {
        lambda_for(&self.config, self.state.calibrator.as_ref(), for_decisions)
    }

    /// The current semiparametric model, read-only.
    pub fn model(&self) -> Result<Semiparametric<'_>> {
        Ok(Semiparametric {
            lm: self.lm,
            memory: &self.state.memory,
            lexstats: &self.state.lexstats,
            lambda: self.lambda(false)?,
            retrieval: self.config.retrieval,
        })
    }

    /// Processes batch `batches[state.next_batch]`; `batches` is the whole
    /// stream so the calibration schedule knows its length.
    pub fn step(&mut self, batches: &[StreamBatch]) -> Result<Vec<DecisionRecord>> {
        check_batches(batches)?;
        let index = self.state.next_batch;
        let batch = batches
            .get(index)
            .ok_or_else(|| Error::invalid("stream already finished"))?;
        for split in [&batch.train, &batch.valid, &batch.test] {
            check_tokens(self.lm, split)?;
        }
        let seed = self.config.seed;
        let id = batch.batch_id;

        let state = &mut self.state;
        let learner = Learner {
            lm: self.lm,
            lambda: lambda_for(&self.config, state.calibrator.as_ref(), true)?,
            retrieval: self.config.retrieval,
        };
        let records = stream_sequence(
            self.config.policy,
            &learner,
            &mut state.memory,
            &mut state.lexstats,
            &batch.train,
            id,
            &mut substream(seed, "policy", id),
            &mut state.stats,
        )?;
        if self.state.stats.batch(id).is_none() {
            self.state.stats.per_batch.push(BatchStats {
                batch_id: id,
                seen: 0,
                memorized: 0,
            });
        }

        if self.config.lambda_mode == LambdaMode::Calibrated {
            self.calibrate(&batch.valid, id, index, batches.len())?;
        }

        if !self.state.memory.is_empty() {
            let params = IndexParams {
                seed: derive_seed(seed, "index", id),
                ..self.config.index
            };
            self.state.memory.rebuild(&params)?;
        }

        let rows = self.state.memory.len() as u64;
        let bytes = rows * self.state.memory.store().row_bytes() as u64;
        let report = &mut self.state.report;
        report.memrate.push(*self.state.stats.batch(id).unwrap());
        report.growth.push(GrowthPoint { batch_id: id, rows, bytes });

        self.state.next_batch += 1;
        let last = self.state.next_batch == batches.len();
        if last || self.state.next_batch.is_multiple_of(self.config.eval_every) {
            let results = self.evaluate_all()?;
            let report = &mut self.state.report;
            report.checkpoints.push(id);
            for (i, r) in results.into_iter().enumerate() {
                report.ppl[i].push(r.ppl);
                report.accuracy[i].push(r.accuracy);
            }
        }
        Ok(records)
    }

    fn calibrate(&mut self, valid: &[TokenId], batch_id: u64, day: usize, days: usize) -> Result<()> {
        let cut = |f: f64| ((f * valid.len() as f64).ceil() as usize).min(valid.len());
        let train_end = cut(self.config.calibration_fraction);
        let valid_end = (train_end + cut(self.config.calibration_validation_fraction)).min(valid.len());
        let model = self.model()?;
        let examples = |slice: &[TokenId]| -> Result<Vec<CalibratorTrainExample>> {
            let found: Vec<Option<CalibratorTrainExample>> = (1..slice.len())
                .into_par_iter()
                .map(|t| model.calibration_example(&slice[..t], slice[t]))
                .collect::<Result<_>>()?;
            Ok(found.into_iter().flatten().collect())
        };
        let fresh = examples(&valid[..train_end])?;
        let held = examples(&valid[train_end..valid_end])?;
        self.state.calibration_examples.extend(fresh);
        self.state.calibration_validation.extend(held);
        if self.state.calibration_examples.is_empty() {
            return Ok(());
        }
        let seed = self.config.seed;
        let weights = match self.state.calibrator.take() {
            Some(w) => w,
            None => CalibratorWeights::new(
                self.lm.hidden_dim(),
                &self.config.calibrator,
                derive_seed(seed, "calibrator-init", 0),
            ),
        };
        let outcome = calibrator::train(
            weights,
            &self.state.calibration_examples,
            &self.state.calibration_validation,
            epoch_schedule(day, days),
            &self.config.calibrator,
            derive_seed(seed, "calibrator-train", batch_id),
        )?;
        self.state.calibrator = Some(outcome.weights);
        Ok(())
    }

    /// Evaluates every registered set against the current frozen state.
    pub fn evaluate_all(&self) -> Result<Vec<EvalResult>> {
        let model = self.model()?;
        self.eval_sets
            .par_iter()
            .map(|e| evaluate(&model, &e.tokens))
            .collect()
    }

    /// Runs all remaining batches.
    pub fn run(&mut self, batches: &[StreamBatch]) -> Result<()> {
        while self.state.next_batch < batches.len() {
            self.step(batches)?;
        }
        Ok(())
    }
}

fn lambda_for<'c>(
    config: &RunConfig,
    calibrator: Option<&'c CalibratorWeights>,
    for_decisions: bool,
) -> Result<Lambda<'c>> {
    Ok(match (config.lambda_mode, calibrator) {
        (LambdaMode::Constant(l), _) => Lambda::Constant(InterpolationWeight::new(l)?),
        (LambdaMode::Calibrated, Some(c)) if !for_decisions || config.calibrate_decisions => Lambda::Calibrated(c),
        (LambdaMode::Calibrated, _) => Lambda::Constant(InterpolationWeight::new(config.fallback_lambda)?),
    })
}

fn check_tokens(lm: &ReferenceLm, tokens: &[TokenId]) -> Result<()> {
    tokens.iter().try_for_each(|&t| lm.vocab().check(t))
}

/// Runs the whole stream from scratch.
pub fn run_cl(
    lm: &ReferenceLm,
    config: &RunConfig,
    batches: &[StreamBatch],
    eval_sets: Vec<EvalSet>,
) -> Result<RunState> {
    check_batches(batches)?;
    let mut run = ContinualRun::new(lm, config.clone(), eval_sets)?;
    run.run(batches)?;
    Ok(run.into_state())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub hidden_dim: usize,
    pub memrate: f64,
    pub ppl: f64,
}

/// Trains one LM per config on `corpus`, runs the stream through `config`'s
/// policy with each, and reports total memorization rate and the pooled PPL
/// over all test splits. Rows are sorted by hidden size.
pub fn model_scaling_experiment(
    corpus: &[TokenId],
    vocab: &Vocabulary,
    lm_configs: &[RefLmConfig],
    batches: &[StreamBatch],
    config: &RunConfig,
) -> Result<Vec<ScalingRow>> {
    if lm_configs.len() < 2 {
        return Err(Error::invalid("scaling needs at least two model configs"));
    }
    check_batches(batches)?;
    let mut rows = lm_configs
        .iter()
        .map(|cfg| {
            let (lm, _) = ReferenceLm::train(corpus, vocab.clone(), cfg)?;
            let state = run_cl(&lm, config, batches, Vec::new())?;
            let memrate = memorization_rate(&state.stats, RateScope::Total)?;
            let run = ContinualRun::resume(&lm, config.clone(), Vec::new(), state)?;
            let ppl = pooled_perplexity(&run.model()?, batches.iter().map(|b| b.test.as_slice()))?;
            Ok(ScalingRow {
                hidden_dim: cfg.d,
                memrate,
                ppl,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by_key(|r| r.hidden_dim);
    Ok(rows)
}

/// Perplexity over the union of several sequences' positions.
pub fn pooled_perplexity<'t, P: ProbabilitySource + ?Sized>(
    model: &P,
    sets: impl IntoIterator<Item = &'t [TokenId]>,
) -> Result<f64> {
    let mut nll = 0.0;
    let mut n = 0usize;
    for s in sets {
        if s.len() < 2 {
            continue;
        }
        let r = evaluate(model, s)?;
        let positions = s.len() - 1;
        nll += r.ppl.ln() * positions as f64;
        n += positions;
    }
    if n == 0 {
        return Err(Error::invalid("no positions to evaluate"));
    }
    Ok((nll / n as f64).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PilotPoint {
    pub delta: f64,
    pub memrate: f64,
    pub ppl: f64,
}

/// Runs SeMem at each threshold over the first batch alone and reports the
/// memorization-rate / test-PPL frontier. Nothing is selected automatically.
pub fn pilot_sweep(
    lm: &ReferenceLm,
    first: &StreamBatch,
    deltas: &[f64],
    config: &RunConfig,
) -> Result<Vec<PilotPoint>> {
    deltas
        .iter()
        .map(|&delta| {
            let cfg = RunConfig {
                policy: Policy::Selective(crate::policy::MemorizationThreshold::new(delta)?),
                ..config.clone()
            };
            let test = EvalSet::new("test", first.test.clone());
            let state = run_cl(lm, &cfg, std::slice::from_ref(first), vec![test])?;
            Ok(PilotPoint {
                delta,
                memrate: state.report.rate(first.batch_id).unwrap_or(0.0),
                ppl: state.report.ppl[0][0],
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub batch_id: u64,
    pub train: PathBuf,
    pub valid: PathBuf,
    pub test: PathBuf,
}

/// Parses `batch_id<TAB>train<TAB>valid<TAB>test` lines; relative paths
/// resolve against the manifest's directory. Blank lines and `#` comments
/// are skipped.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("."));
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(Error::invalid(format!("manifest line {}: expected 4 tab-separated fields", n + 1)));
        }
        let batch_id = f[0]
            .parse()
            .map_err(|_| Error::invalid(format!("manifest line {}: bad batch id {:?}", n + 1, f[0])))?;
        let resolve = |p: &str| base.join(p);
        out.push(ManifestEntry {
            batch_id,
            train: resolve(f[1]),
            valid: resolve(f[2]),
            test: resolve(f[3]),
        });
    }
    if out.windows(2).any(|w| w[0].batch_id >= w[1].batch_id) {
        return Err(Error::invalid("manifest batch ids must be strictly increasing"));
    }
    Ok(out)
}

/// Writes entries with paths relative to the manifest directory when possible.
pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new(""));
    let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
    let mut s = String::new();
    for e in entries {
        s += &format!("{}\t{}\t{}\t{}\n", e.batch_id, rel(&e.train), rel(&e.valid), rel(&e.test));
    }
    fs::write(path, s)?;
    Ok(())
}

fn read_tokens(path: &Path, vocab: &Vocabulary) -> Result<Vec<TokenId>> {
    let text = fs::read_to_string(path)?;
    Ok(vocab.encode(&tokenize(&text)))
}

pub fn load_batches(entries: &[ManifestEntry], vocab: &Vocabulary) -> Result<Vec<StreamBatch>> {
    entries
        .iter()
        .map(|e| {
            Ok(StreamBatch {
                batch_id: e.batch_id,
                train: read_tokens(&e.train, vocab)?,
                valid: read_tokens(&e.valid, vocab)?,
                test: read_tokens(&e.test, vocab)?,
                sources: Some(e.clone()),
            })
        })
        .collect()
}

pub fn decisions_csv(records: &[DecisionRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s += &r.csv_line();
        s.push('\n');
    }
    s
}
