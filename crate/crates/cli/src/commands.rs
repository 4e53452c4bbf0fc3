use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use rand::seq::SliceRandom;
use serde_json::{json, Value};

use semem::calibrator::{self, AdamConfig, CalibratorConfig, CalibratorTrainExample, CalibratorWeights};
use semem::harness::{
    evaluate, forgetting_matrix, load_batches, pilot_sweep, read_manifest, write_manifest, ManifestEntry, RunReport,
};
use semem::lexstats::LexStats;
use semem::rng::{derive_seed, substream};
use semem::synth::{token_name, SyntheticConfig};
use semem::vocab::tokenize;
use semem::{
    ContinualRun, EvalSet, IndexParams, InterpolationWeight, Lambda, LambdaMode, MemorizationThreshold, Memory,
    Policy, RefLmConfig, ReferenceLm, Retrieval, RunConfig, RunState, Semiparametric, TokenId, Vocabulary,
};

use crate::config::Config;
use crate::error::{io_at, CliError, CliResult};

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Seed for every random choice the command makes [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Flat `key = value` config file with [sections]; flags take precedence
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (created if missing)
    #[arg(long)]
    pub out: PathBuf,
}

fn setup(common: &Common) -> CliResult<(Config, u64)> {
    let cfg = Config::load(common.config.as_deref())?;
    let seed = cfg.pick(common.seed, "seed", 0)?;
    io_at(&common.out, fs::create_dir_all(&common.out))?;
    Ok((cfg, seed))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    io_at(path, fs::write(path, contents))
}

fn read_text(path: &Path) -> CliResult<String> {
    io_at(path, fs::read_to_string(path))
}

fn read_encoded(path: &Path, vocab: &Vocabulary) -> CliResult<Vec<TokenId>> {
    Ok(vocab.encode(&tokenize(&read_text(path)?)))
}

fn write_vocab(path: &Path, vocab: &Vocabulary) -> CliResult<()> {
    let mut s = String::new();
    for t in vocab.tokens() {
        s += t;
        s.push('\n');
    }
    write(path, s)
}

fn read_vocab(path: &Path) -> CliResult<Vocabulary> {
    let tokens = read_text(path)?.lines().map(str::to_owned).collect();
    Ok(Vocabulary::from_tokens(tokens)?)
}

fn batch_dir(out: &Path, batch: usize) -> PathBuf {
    out.join("batches").join(format!("{batch:04}"))
}

/// Writes one batch's splits and returns its manifest entry.
fn write_batch(out: &Path, batch: usize, splits: [&str; 3]) -> CliResult<ManifestEntry> {
    let dir = batch_dir(out, batch);
    io_at(&dir, fs::create_dir_all(&dir))?;
    let [train, valid, test] = ["train.txt", "valid.txt", "test.txt"].map(|f| dir.join(f));
    write(&train, splits[0])?;
    write(&valid, splits[1])?;
    write(&test, splits[2])?;
    Ok(ManifestEntry {
        batch_id: batch as u64,
        train,
        valid,
        test,
    })
}

fn parse_split(s: &str) -> CliResult<[f64; 3]> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::usage(format!("split {s:?} must be three comma-separated numbers")))?;
    let ratios: [f64; 3] = parts
        .try_into()
        .map_err(|_| CliError::usage(format!("split {s:?} must have exactly three parts")))?;
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(CliError::usage(format!("split ratios {s:?} must lie in [0, 1] and sum to 1")));
    }
    Ok(ratios)
}

#[derive(Args, Debug)]
pub struct PrepareArgs {
    #[command(flatten)]
    pub common: Common,
    /// Corpus files, one document per line, read in the given order
    #[arg(long, required = true, num_args = 1..)]
    pub corpus: Vec<PathBuf>,
    /// Number of chronological batches [default: 10]
    #[arg(long)]
    pub batches: Option<usize>,
    /// Vocabulary size including <unk> [default: 50000]
    #[arg(long)]
    pub vocab_size: Option<usize>,
    /// Train,valid,test ratios within each batch [default: 0.98,0.01,0.01]
    #[arg(long)]
    pub split: Option<String>,
}

/// Chronological batching: contiguous line ranges, each split by a seeded
/// random assignment that keeps the original line order within a split.
pub fn prepare(a: &PrepareArgs) -> CliResult<Value> {
    let (cfg, seed) = setup(&a.common)?;
    let n_batches: usize = cfg.pick(a.batches, "prepare.batches", 10)?;
    let vocab_size: usize = cfg.pick(a.vocab_size, "prepare.vocab_size", 50_000)?;
    let ratios = parse_split(&cfg.pick(a.split.clone(), "prepare.split", "0.98,0.01,0.01".to_owned())?)?;

    let mut lines = Vec::new();
    for path in &a.corpus {
        let text = read_text(path)?;
        lines.extend(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_owned));
    }
    if n_batches == 0 || lines.len() < n_batches {
        return Err(CliError::usage(format!(
            "{} non-empty lines cannot fill {n_batches} batches",
            lines.len()
        )));
    }

    let out = &a.common.out;
    let mut entries = Vec::with_capacity(n_batches);
    let mut train_tokens = Vec::new();
    let mut sizes = Vec::new();
    for b in 0..n_batches {
        let chunk = &lines[b * lines.len() / n_batches..(b + 1) * lines.len() / n_batches];
        let n = chunk.len();
        let n_valid = (ratios[1] * n as f64).round() as usize;
        let n_test = ((ratios[2] * n as f64).round() as usize).min(n - n_valid.min(n));
        let n_valid = n_valid.min(n);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut substream(seed, "prepare", b as u64));
        let mut role = vec![0u8; n];
        order[..n_valid].iter().for_each(|&i| role[i] = 1);
        order[n_valid..n_valid + n_test].iter().for_each(|&i| role[i] = 2);
        let mut splits = [String::new(), String::new(), String::new()];
        for (line, &r) in chunk.iter().zip(&role) {
            splits[r as usize] += line;
            splits[r as usize].push('\n');
        }
        train_tokens.extend(tokenize(&splits[0]));
        sizes.push([n - n_valid - n_test, n_valid, n_test]);
        entries.push(write_batch(out, b, [&splits[0], &splits[1], &splits[2]])?);
    }
    write_manifest(out.join("manifest.tsv"), &entries)?;
    let vocab = if train_tokens.is_empty() {
        Vocabulary::from_tokens(vec![semem::vocab::UNK_TOKEN.to_owned()])?
    } else {
        Vocabulary::build(&train_tokens, vocab_size)?
    };
    write_vocab(&out.join("vocab.txt"), &vocab)?;
    Ok(json!({
        "batches": n_batches,
        "lines": lines.len(),
        "split_lines": sizes,
        "vocab_size": vocab.len(),
        "manifest": out.join("manifest.tsv"),
    }))
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    /// Number of chain states / token types [default: 60]
    #[arg(long)]
    pub vocab_size: Option<usize>,
    /// Successors per chain state [default: 3]
    #[arg(long)]
    pub branching: Option<usize>,
    /// Successor weight decay exponent [default: 1.5]
    #[arg(long)]
    pub zipf: Option<f64>,
    /// Number of injected facts [default: 200]
    #[arg(long)]
    pub fact_pool: Option<usize>,
    /// Tokens per fact [default: 6]
    #[arg(long)]
    pub fact_len: Option<usize>,
    /// Per-token probability of emitting a fact [default: 0.02]
    #[arg(long)]
    pub fact_rate: Option<f64>,
    /// Fraction of facts replaced at each new batch [default: 0]
    #[arg(long)]
    pub novelty: Option<f64>,
    /// Number of batches [default: 10]
    #[arg(long)]
    pub batches: Option<usize>,
    /// Train tokens per batch [default: 20000]
    #[arg(long)]
    pub train_tokens: Option<usize>,
    /// Validation tokens per batch [default: 1000]
    #[arg(long)]
    pub valid_tokens: Option<usize>,
    /// Test tokens per batch [default: 1000]
    #[arg(long)]
    pub test_tokens: Option<usize>,
    /// Fact-free corpus for LM training [default: 30000]
    #[arg(long)]
    pub base_tokens: Option<usize>,
    /// Fact-free held-out set [default: 2000]
    #[arg(long)]
    pub out_of_stream_tokens: Option<usize>,
}

const SYNTH_LINE: usize = 100;

fn as_lines(tokens: &[String]) -> String {
    let mut s = String::new();
    for line in tokens.chunks(SYNTH_LINE) {
        s += &line.join(" ");
        s.push('\n');
    }
    s
}

/// Writes a seeded synthetic stream in the layout `prepare` produces, plus
/// `base.txt` (LM training corpus) and `out_of_stream.txt`.
pub fn synth(a: &SynthArgs) -> CliResult<Value> {
    let (cfg, seed) = setup(&a.common)?;
    let d = SyntheticConfig::default();
    let sc = SyntheticConfig {
        vocab_size: cfg.pick(a.vocab_size, "synth.vocab_size", d.vocab_size)?,
        branching: cfg.pick(a.branching, "synth.branching", d.branching)?,
        zipf: cfg.pick(a.zipf, "synth.zipf", d.zipf)?,
        fact_pool: cfg.pick(a.fact_pool, "synth.fact_pool", d.fact_pool)?,
        fact_len: cfg.pick(a.fact_len, "synth.fact_len", d.fact_len)?,
        fact_rate: cfg.pick(a.fact_rate, "synth.fact_rate", d.fact_rate)?,
        novelty: cfg.pick(a.novelty, "synth.novelty", d.novelty)?,
        batches: cfg.pick(a.batches, "synth.batches", d.batches)?,
        train_tokens: cfg.pick(a.train_tokens, "synth.train_tokens", d.train_tokens)?,
        valid_tokens: cfg.pick(a.valid_tokens, "synth.valid_tokens", d.valid_tokens)?,
        test_tokens: cfg.pick(a.test_tokens, "synth.test_tokens", d.test_tokens)?,
        base_tokens: cfg.pick(a.base_tokens, "synth.base_tokens", d.base_tokens)?,
        out_of_stream_tokens: cfg.pick(a.out_of_stream_tokens, "synth.out_of_stream_tokens", d.out_of_stream_tokens)?,
        seed,
    };
    let stream = sc.generate()?;
    let out = &a.common.out;
    write(&out.join("base.txt"), as_lines(&stream.base_corpus))?;
    write(&out.join("out_of_stream.txt"), as_lines(&stream.out_of_stream))?;
    let names: Vec<String> = (0..sc.vocab_size).map(token_name).collect();
    write_vocab(&out.join("vocab.txt"), &Vocabulary::build(&names, sc.vocab_size + 1)?)?;
    let mut entries = Vec::with_capacity(stream.batches.len());
    for (i, b) in stream.batches.iter().enumerate() {
        let splits = [as_lines(&b.train), as_lines(&b.valid), as_lines(&b.test)];
        entries.push(write_batch(out, i, [&splits[0], &splits[1], &splits[2]])?);
    }
    write_manifest(out.join("manifest.tsv"), &entries)?;
    Ok(json!({
        "batches": sc.batches,
        "vocab_size": sc.vocab_size + 1,
        "manifest": out.join("manifest.tsv"),
        "base": out.join("base.txt"),
        "out_of_stream": out.join("out_of_stream.txt"),
    }))
}

#[derive(Args, Debug)]
pub struct TrainLmArgs {
    #[command(flatten)]
    pub common: Common,
    /// Training corpus (whitespace-tokenized, lowercased)
    #[arg(long)]
    pub corpus: PathBuf,
    /// Vocabulary file, one token per line with <unk> first; built from the corpus if absent
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Vocabulary size when building from the corpus [default: 50000]
    #[arg(long)]
    pub vocab_size: Option<usize>,
    /// Hidden width [default: 64]
    #[arg(long)]
    pub d: Option<usize>,
    /// Context window in tokens [default: 8]
    #[arg(long)]
    pub m: Option<usize>,
    /// Training epochs [default: 5]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// SGD step size [default: 0.05]
    #[arg(long)]
    pub learning_rate: Option<f64>,
}

pub fn train_lm(a: &TrainLmArgs) -> CliResult<Value> {
    let (cfg, seed) = setup(&a.common)?;
    let text = read_text(&a.corpus)?;
    let tokens = tokenize(&text);
    let vocab = match &a.vocab {
        Some(p) => read_vocab(p)?,
        None => Vocabulary::build(&tokens, cfg.pick(a.vocab_size, "lm.vocab_size", 50_000)?)?,
    };
    let d = RefLmConfig::default();
    let lm_cfg = RefLmConfig {
        d: cfg.pick(a.d, "lm.d", d.d)?,
        m: cfg.pick(a.m, "lm.m", d.m)?,
        epochs: cfg.pick(a.epochs, "lm.epochs", d.epochs)?,
        learning_rate: cfg.pick(a.learning_rate, "lm.learning_rate", d.learning_rate)?,
        seed,
    };
    let corpus = vocab.encode(&tokens);
    let (lm, trace) = ReferenceLm::train(&corpus, vocab, &lm_cfg)?;
    let out = &a.common.out;
    lm.save(out.join("lm.bin"))?;
    let mut csv = String::from("epoch,cross_entropy\n");
    for (e, ce) in trace.cross_entropy.iter().enumerate() {
        writeln!(csv, "{e},{ce}").unwrap();
    }
    write(&out.join("lm_trace.csv"), csv)?;
    Ok(json!({
        "lm": out.join("lm.bin"),
        "vocab_size": lm.vocab_size(),
        "d": lm_cfg.d,
        "m": lm_cfg.m,
        "epochs": lm_cfg.epochs,
        "cross_entropy": trace.cross_entropy.last(),
    }))
}

/// Options shared by commands that build a semiparametric model.
#[derive(Args, Debug, Clone)]
pub struct RetrievalArgs {
    /// Neighbors retrieved per query [default: 64]
    #[arg(long)]
    pub k: Option<usize>,
    /// Inverted lists probed per query [default: 8]
    #[arg(long)]
    pub nprobe: Option<usize>,
}

impl RetrievalArgs {
    fn resolve(&self, cfg: &Config) -> CliResult<Retrieval> {
        let d = Retrieval::default();
        Ok(Retrieval {
            k: cfg.pick(self.k, "run.k", d.k)?,
            nprobe: cfg.pick(self.nprobe, "run.nprobe", d.nprobe)?,
        })
    }
}

#[derive(Args, Debug, Clone)]
pub struct CalibratorArgs {
    /// Calibrator encoder and trunk width [default: 128]
    #[arg(long)]
    pub width: Option<usize>,
    /// Calibrator minibatch size [default: 16]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Calibrator Adam step size [default: 0.0003]
    #[arg(long)]
    pub calibrator_lr: Option<f64>,
}

impl CalibratorArgs {
    fn resolve(&self, cfg: &Config) -> CliResult<CalibratorConfig> {
        let d = CalibratorConfig::default();
        Ok(CalibratorConfig {
            width: cfg.pick(self.width, "calibrator.width", d.width)?,
            batch_size: cfg.pick(self.batch_size, "calibrator.batch_size", d.batch_size)?,
            adam: AdamConfig {
                learning_rate: cfg.pick(self.calibrator_lr, "calibrator.learning_rate", d.adam.learning_rate)?,
                ..d.adam
            },
            ..d
        })
    }
}

fn parse_eval_sets(specs: &[String], vocab: &Vocabulary) -> CliResult<Vec<EvalSet>> {
    specs
        .iter()
        .map(|s| {
            let (name, path) = s
                .split_once('=')
                .ok_or_else(|| CliError::usage(format!("eval set {s:?} must look like NAME=PATH")))?;
            Ok(EvalSet::new(name, read_encoded(Path::new(path), vocab)?))
        })
        .collect()
}

fn parse_lambda(s: &str) -> CliResult<LambdaMode> {
    if s == "calibrated" {
        return Ok(LambdaMode::Calibrated);
    }
    let l: f64 = s
        .parse()
        .map_err(|_| CliError::usage(format!("lambda {s:?} must be `calibrated` or a number")))?;
    InterpolationWeight::new(l)?;
    Ok(LambdaMode::Constant(l))
}

fn parse_deltas(s: &str) -> CliResult<Vec<f64>> {
    s.split(',')
        .map(|d| {
            d.trim()
                .parse()
                .map_err(|_| CliError::usage(format!("threshold list {s:?} is not comma-separated numbers")))
        })
        .collect()
}

#[derive(Args, Debug)]
pub struct RunClArgs {
    #[command(flatten)]
    pub common: Common,
    /// Stream manifest (batch_id, train, valid, test per line)
    #[arg(long)]
    pub manifest: PathBuf,
    /// Trained reference LM snapshot
    #[arg(long)]
    pub lm: PathBuf,
    /// Evaluation set evaluated at every checkpoint; repeatable
    #[arg(long = "eval", value_name = "NAME=PATH")]
    pub eval: Vec<String>,
    /// Memorization policy: semem, full or random [default: semem]
    #[arg(long)]
    pub policy: Option<String>,
    /// SeMem threshold in nats; `-inf` never memorizes [default: -1.5]
    #[arg(long, allow_hyphen_values = true)]
    pub delta: Option<f64>,
    /// Memorization probability for the random policy [default: 0.5]
    #[arg(long)]
    pub p: Option<f64>,
    /// Interpolation weight: `calibrated` or a constant in [0, 1] [default: calibrated]
    #[arg(long)]
    pub lambda: Option<String>,
    /// Weight used before the first calibrator exists [default: 0.25]
    #[arg(long)]
    pub fallback_lambda: Option<f64>,
    /// Whether SeMem decisions use the calibrator once trained [default: true]
    #[arg(long)]
    pub calibrate_decisions: Option<bool>,
    #[command(flatten)]
    pub retrieval: RetrievalArgs,
    /// IVF centroids [default: 64]
    #[arg(long)]
    pub n_centroids: Option<usize>,
    /// Rows sampled for k-means [default: 16384]
    #[arg(long)]
    pub sample_size: Option<usize>,
    /// k-means iterations [default: 10]
    #[arg(long)]
    pub kmeans_iters: Option<usize>,
    /// Fraction of each validation split used to train the calibrator [default: 0.02]
    #[arg(long)]
    pub calibration_fraction: Option<f64>,
    /// Fraction of each validation split used for calibrator checkpoint selection [default: 0.01]
    #[arg(long)]
    pub calibration_validation_fraction: Option<f64>,
    #[command(flatten)]
    pub calibrator: CalibratorArgs,
    /// Evaluate after every N batches and after the last [default: 1]
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Also sweep thresholds on the first batch and write pilot.csv
    #[arg(long)]
    pub pilot: bool,
    /// Thresholds for --pilot [default: -2.5,-2,-1.5,-1,-0.5]
    #[arg(long, allow_negative_numbers = true)]
    pub pilot_deltas: Option<String>,
    /// Continue from the state saved by an earlier run-cl in this directory
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop once this many batches have been processed in total
    #[arg(long)]
    pub stop_after: Option<usize>,
}

fn run_config(a: &RunClArgs, cfg: &Config, seed: u64) -> CliResult<RunConfig> {
    let d = RunConfig::default();
    let policy = match cfg.pick(a.policy.clone(), "run.policy", "semem".to_owned())?.as_str() {
        "full" => Policy::Full,
        "random" => Policy::Random {
            p: cfg.pick(a.p, "run.p", 0.5)?,
        },
        "semem" => {
            let delta: f64 = cfg.pick(a.delta, "run.delta", MemorizationThreshold::DEFAULT)?;
            Policy::Selective(if delta == f64::NEG_INFINITY {
                MemorizationThreshold::never()
            } else {
                MemorizationThreshold::new(delta)?
            })
        }
        other => return Err(CliError::usage(format!("unknown policy {other:?}; use semem, full or random"))),
    };
    let lambda: String = cfg.pick(a.lambda.clone(), "run.lambda", "calibrated".to_owned())?;
    let config = RunConfig {
        policy,
        lambda_mode: parse_lambda(&lambda)?,
        fallback_lambda: cfg.pick(a.fallback_lambda, "run.fallback_lambda", d.fallback_lambda)?,
        calibrate_decisions: cfg.pick(a.calibrate_decisions, "run.calibrate_decisions", d.calibrate_decisions)?,
        retrieval: a.retrieval.resolve(cfg)?,
        index: IndexParams {
            n_centroids: cfg.pick(a.n_centroids, "run.n_centroids", d.index.n_centroids)?,
            sample_size: cfg.pick(a.sample_size, "run.sample_size", d.index.sample_size)?,
            kmeans_iters: cfg.pick(a.kmeans_iters, "run.kmeans_iters", d.index.kmeans_iters)?,
            seed,
        },
        calibrator: a.calibrator.resolve(cfg)?,
        calibration_fraction: cfg.pick(a.calibration_fraction, "run.calibration_fraction", d.calibration_fraction)?,
        calibration_validation_fraction: cfg.pick(
            a.calibration_validation_fraction,
            "run.calibration_validation_fraction",
            d.calibration_validation_fraction,
        )?,
        eval_every: cfg.pick(a.eval_every, "run.eval_every", d.eval_every)?,
        seed,
    };
    config.validate()?;
    Ok(config)
}

fn forgetting_csv(report: &RunReport) -> String {
    let mut s = String::from("eval_set,min_ppl,final_ppl,delta\n");
    for r in forgetting_matrix(report) {
        writeln!(s, "{},{},{},{}", r.eval_set, r.min_ppl, r.final_ppl, r.delta).unwrap();
    }
    s
}

fn write_report(out: &Path, report: &RunReport) -> CliResult<()> {
    report.write_csv(out)?;
    write(&out.join("forgetting.csv"), forgetting_csv(report))
}

fn summary(state: &RunState) -> Value {
    let final_ppl: serde_json::Map<String, Value> = state
        .report
        .eval_sets
        .iter()
        .zip(&state.report.ppl)
        .map(|(name, row)| (name.clone(), json!(row.last())))
        .collect();
    json!({
        "batches": state.next_batch,
        "rows": state.memory.len(),
        "bytes": state.report.growth.last().map_or(0, |g| g.bytes),
        "seen": state.stats.seen,
        "memorized": state.stats.memorized,
        "rate": state.report.total_rate(),
        "final_ppl": final_ppl,
    })
}

fn state_dir(dir: &Path) -> PathBuf {
    let nested = dir.join("state");
    if nested.is_dir() {
        nested
    } else {
        dir.to_path_buf()
    }
}

pub fn run_cl(a: &RunClArgs) -> CliResult<Value> {
    let (cfg, seed) = setup(&a.common)?;
    let config = run_config(a, &cfg, seed)?;
    let lm = ReferenceLm::load(&a.lm)?;
    let batches = load_batches(&read_manifest(&a.manifest)?, lm.vocab())?;
    let eval_sets = parse_eval_sets(&a.eval, lm.vocab())?;
    let out = &a.common.out;

    if a.pilot {
        let deltas = parse_deltas(&cfg.pick(
            a.pilot_deltas.clone(),
            "run.pilot_deltas",
            "-2.5,-2,-1.5,-1,-0.5".to_owned(),
        )?)?;
        let first = batches.first().ok_or_else(|| CliError::usage("manifest has no batches"))?;
        let mut csv = String::from("delta,memrate,ppl\n");
        for p in pilot_sweep(&lm, first, &deltas, &config)? {
            writeln!(csv, "{},{},{}", p.delta, p.memrate, p.ppl).unwrap();
        }
        write(&out.join("pilot.csv"), csv)?;
    }

    let mut run = match &a.resume {
        Some(dir) => ContinualRun::resume(&lm, config, eval_sets, RunState::load(state_dir(dir))?)?,
        None => ContinualRun::new(&lm, config, eval_sets)?,
    };
    let stop = a.stop_after.unwrap_or(batches.len()).min(batches.len());
    let mut records = Vec::new();
    while run.state().next_batch < stop {
        let b = run.state().next_batch;
        records.extend(run.step(&batches)?);
        eprintln!(
            "batch {}: rate {:.4}, {} rows",
            batches[b].batch_id,
            run.report().rate(batches[b].batch_id).unwrap_or(0.0),
            run.state().memory.len()
        );
    }
    let mut decisions = String::from("batch_id,position,log_p_full,decision\n");
    decisions += &semem::harness::decisions_csv(&records);
    write(&out.join("decisions.csv"), decisions)?;
    write_report(out, run.report())?;
    run.state().save(out.join("state"))?;
    Ok(summary(run.state()))
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Trained reference LM snapshot
    #[arg(long)]
    pub lm: PathBuf,
    /// Run directory (or its state/ subdirectory) providing memory and calibrator; bare LM if absent
    #[arg(long)]
    pub state: Option<PathBuf>,
    /// Calibrator snapshot overriding the one in --state
    #[arg(long)]
    pub calibrator: Option<PathBuf>,
    /// `calibrated` or a constant in [0, 1] [default: calibrated when a calibrator is available, else 0.25]
    #[arg(long)]
    pub lambda: Option<String>,
    /// Evaluation set; repeatable
    #[arg(long = "eval", value_name = "NAME=PATH", required = true)]
    pub eval: Vec<String>,
    #[command(flatten)]
    pub retrieval: RetrievalArgs,
}

pub fn eval(a: &EvalArgs) -> CliResult<Value> {
    let (cfg, _) = setup(&a.common)?;
    let lm = ReferenceLm::load(&a.lm)?;
    let (memory, lexstats, mut calibrator) = match &a.state {
        Some(dir) => {
            let s = RunState::load(state_dir(dir))?;
            (s.memory, s.lexstats, s.calibrator)
        }
        None => (Memory::new(lm.hidden_dim()), LexStats::new(lm.vocab_size()), None),
    };
    if let Some(p) = &a.calibrator {
        calibrator = Some(CalibratorWeights::load(p)?);
    }
    let default = if calibrator.is_some() { "calibrated" } else { "0.25" };
    let lambda = match parse_lambda(&cfg.pick(a.lambda.clone(), "run.lambda", default.to_owned())?)? {
        LambdaMode::Constant(l) => Lambda::Constant(InterpolationWeight::new(l)?),
        LambdaMode::Calibrated => Lambda::Calibrated(
            calibrator
                .as_ref()
                .ok_or_else(|| CliError::usage("calibrated lambda needs a calibrator (--state or --calibrator)"))?,
        ),
    };
    let model = Semiparametric {
        lm: &lm,
        memory: &memory,
        lexstats: &lexstats,
        lambda,
        retrieval: a.retrieval.resolve(&cfg)?,
    };
    let mut csv = String::from("eval_set,ppl,accuracy\n");
    let mut results = serde_json::Map::new();
    for set in parse_eval_sets(&a.eval, lm.vocab())? {
        let r = evaluate(&model, &set.tokens)?;
        writeln!(csv, "{},{},{}", set.name, r.ppl, r.accuracy).unwrap();
        results.insert(set.name, json!({ "ppl": r.ppl, "accuracy": r.accuracy }));
    }
    write(&a.common.out.join("eval.csv"), csv)?;
    Ok(json!({ "rows": memory.len(), "results": results }))
}

#[derive(Args, Debug)]
pub struct CalibrateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Trained reference LM snapshot
    #[arg(long)]
    pub lm: PathBuf,
    /// Run directory (or its state/ subdirectory) whose memory the calibrator is fit against
    #[arg(long)]
    pub state: PathBuf,
    /// Stream manifest whose validation splits supply examples
    #[arg(long)]
    pub manifest: PathBuf,
    /// Fraction of each validation split used for training [default: 0.02]
    #[arg(long)]
    pub calibration_fraction: Option<f64>,
    /// Following fraction used for checkpoint selection [default: 0.01]
    #[arg(long)]
    pub calibration_validation_fraction: Option<f64>,
    /// Training epochs [default: 5]
    #[arg(long)]
    pub epochs: Option<usize>,
    #[command(flatten)]
    pub calibrator: CalibratorArgs,
    #[command(flatten)]
    pub retrieval: RetrievalArgs,
}

/// Fits a fresh calibrator against a finished run's memory.
pub fn calibrate(a: &CalibrateArgs) -> CliResult<Value> {
    let (cfg, seed) = setup(&a.common)?;
    let lm = ReferenceLm::load(&a.lm)?;
    let state = RunState::load(state_dir(&a.state))?;
    let batches = load_batches(&read_manifest(&a.manifest)?, lm.vocab())?;
    let d = RunConfig::default();
    let train_frac: f64 = cfg.pick(a.calibration_fraction, "run.calibration_fraction", d.calibration_fraction)?;
    let valid_frac: f64 = cfg.pick(
        a.calibration_validation_fraction,
        "run.calibration_validation_fraction",
        d.calibration_validation_fraction,
    )?;
    if !(0.0..=1.0).contains(&train_frac) || !(0.0..=1.0).contains(&valid_frac) || train_frac + valid_frac > 1.0 {
        return Err(CliError::usage("calibration fractions must lie in [0, 1] and sum to at most 1"));
    }
    let epochs = cfg.pick(a.epochs, "calibrator.epochs", 5)?;
    let cal_cfg = a.calibrator.resolve(&cfg)?;
    let model = Semiparametric {
        lm: &lm,
        memory: &state.memory,
        lexstats: &state.lexstats,
        lambda: Lambda::Constant(InterpolationWeight::new(d.fallback_lambda)?),
        retrieval: a.retrieval.resolve(&cfg)?,
    };
    let examples = |tokens: &[TokenId]| -> CliResult<Vec<CalibratorTrainExample>> {
        let mut out = Vec::new();
        for t in 1..tokens.len() {
            out.extend(model.calibration_example(&tokens[..t], tokens[t])?);
        }
        Ok(out)
    };
    let (mut train, mut held) = (Vec::new(), Vec::new());
    for b in &batches {
        let cut = |f: f64| ((f * b.valid.len() as f64).ceil() as usize).min(b.valid.len());
        let (t_end, v_end) = (cut(train_frac), (cut(train_frac) + cut(valid_frac)).min(b.valid.len()));
        train.extend(examples(&b.valid[..t_end])?);
        held.extend(examples(&b.valid[t_end..v_end])?);
    }
    if train.is_empty() {
        return Err(CliError::usage(
            "no calibration examples: memory is empty or the validation slices are too short",
        ));
    }
    let init = CalibratorWeights::new(lm.hidden_dim(), &cal_cfg, derive_seed(seed, "calibrator-init", 0));
    let outcome = calibrator::train(init, &train, &held, epochs, &cal_cfg, derive_seed(seed, "calibrator-train", 0))?;
    let out = &a.common.out;
    outcome.weights.save(out.join("calibrator.bin"))?;
    let mut csv = String::from("epoch,train_loss,valid_loss\n");
    for (e, l) in outcome.loss_trace.iter().enumerate() {
        let v = outcome.validation_trace.get(e).map(f64::to_string).unwrap_or_default();
        writeln!(csv, "{e},{l},{v}").unwrap();
    }
    write(&out.join("calibration_trace.csv"), csv)?;
    Ok(json!({
        "calibrator": out.join("calibrator.bin"),
        "examples": train.len(),
        "validation_examples": held.len(),
        "selected_epoch": outcome.selected_epoch,
        "train_loss": outcome.loss_trace.last(),
    }))
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    #[command(flatten)]
    pub common: Common,
    /// Run directory written by run-cl (or its state/ subdirectory)
    #[arg(long)]
    pub run: PathBuf,
}

/// Re-exports a finished run's report tables and prints its memory summary.
pub fn stats(a: &StatsArgs) -> CliResult<Value> {
    setup(&a.common)?;
    let state = RunState::load(state_dir(&a.run))?;
    write_report(&a.common.out, &state.report)?;
    let mut s = summary(&state);
    s["per_batch"] = json!(state
        .report
        .memrate
        .iter()
        .map(|b| json!({ "batch_id": b.batch_id, "seen": b.seen, "memorized": b.memorized }))
        .collect::<Vec<_>>());
    Ok(s)
}
