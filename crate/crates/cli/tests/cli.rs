use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn semem(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semem")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> serde_json::Value {
    let out = semem(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small synthetic stream plus a trained LM.
struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        let data = dir.path().join("data");
        ok(&[
            "synth", "--out", s(&data), "--seed", "3", "--batches", "3", "--train-tokens", "2000",
            "--valid-tokens", "800", "--test-tokens", "300", "--base-tokens", "4000",
            "--out-of-stream-tokens", "600",
        ]);
        let lm = dir.path().join("lm");
        ok(&[
            "train-lm", "--out", s(&lm), "--corpus", s(&data.join("base.txt")), "--vocab",
            s(&data.join("vocab.txt")), "--d", "16", "--m", "3", "--epochs", "1",
        ]);
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, out: &str, extra: &[&str]) -> PathBuf {
        let out = self.path(out);
        let (manifest, lm, oos) = (self.path("data/manifest.tsv"), self.path("lm/lm.bin"), self.path("data/out_of_stream.txt"));
        let eval = format!("oos={}", s(&oos));
        let mut args = vec![
            "run-cl", "--out", s(&out), "--manifest", s(&manifest), "--lm", s(&lm), "--eval", &eval,
            "--n-centroids", "8", "--seed", "5",
        ];
        args.extend_from_slice(extra);
        ok(&args);
        out
    }
}

#[test]
fn exit_codes_follow_error_kind() {
    let f = Fixture::new();
    let help = semem(&["--help"]);
    assert_eq!(help.status.code(), Some(0));

    assert_eq!(semem(&["frobnicate"]).status.code(), Some(1));
    let manifest = f.path("data/manifest.tsv");
    let lm = f.path("lm/lm.bin");
    let bad_policy = semem(&[
        "run-cl", "--out", s(&f.path("x")), "--manifest", s(&manifest), "--lm", s(&lm), "--policy", "sometimes",
    ]);
    assert_eq!(bad_policy.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad_policy.stderr).contains("sometimes"));

    let missing = semem(&["train-lm", "--out", s(&f.path("y")), "--corpus", s(&f.path("nope.txt"))]);
    assert_eq!(missing.status.code(), Some(2));

    // With lambda 1, tokens absent from the retrieved neighbors get probability zero.
    let run = f.run("run", &[]);
    let oos = format!("oos={}", s(&f.path("data/out_of_stream.txt")));
    let zero = semem(&[
        "eval", "--out", s(&f.path("z")), "--lm", s(&lm), "--state", s(&run), "--lambda", "1", "--eval", &oos,
    ]);
    assert_eq!(zero.status.code(), Some(3), "{}", String::from_utf8_lossy(&zero.stderr));
}

#[test]
fn run_cl_is_deterministic() {
    let f = Fixture::new();
    let a = f.run("a", &[]);
    let b = f.run("b", &[]);
    for csv in ["memrate.csv", "ppl_matrix.csv", "accuracy_matrix.csv", "growth.csv", "forgetting.csv", "decisions.csv"] {
        assert_eq!(fs::read(a.join(csv)).unwrap(), fs::read(b.join(csv)).unwrap(), "{csv}");
    }
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let f = Fixture::new();
    let full = f.run("full", &[]);
    let part = f.run("part", &["--stop-after", "1"]);
    let resumed = f.run("resumed", &["--resume", s(&part)]);
    for csv in ["memrate.csv", "ppl_matrix.csv", "growth.csv"] {
        assert_eq!(fs::read(full.join(csv)).unwrap(), fs::read(resumed.join(csv)).unwrap(), "{csv}");
    }
}

#[test]
fn stats_reports_one_growth_row_per_batch() {
    let f = Fixture::new();
    let run = f.run("run", &[]);
    let out = f.path("stats");
    let summary = ok(&["stats", "--out", s(&out), "--run", s(&run)]);
    assert_eq!(summary["batches"], 3);
    let growth = fs::read_to_string(out.join("growth.csv")).unwrap();
    assert_eq!(growth.lines().count(), 1 + 3);
    let memorized: u64 = summary["per_batch"].as_array().unwrap().iter().map(|b| b["memorized"].as_u64().unwrap()).sum();
    assert_eq!(memorized, summary["rows"].as_u64().unwrap());
}

#[test]
fn zero_lambda_eval_equals_bare_model() {
    let f = Fixture::new();
    let run = f.run("run", &[]);
    let (lm, oos) = (f.path("lm/lm.bin"), format!("oos={}", s(&f.path("data/out_of_stream.txt"))));
    let bare = ok(&["eval", "--out", s(&f.path("bare")), "--lm", s(&lm), "--lambda", "0", "--eval", &oos]);
    let mixed = ok(&[
        "eval", "--out", s(&f.path("mixed")), "--lm", s(&lm), "--state", s(&run), "--lambda", "0", "--eval", &oos,
    ]);
    let (b, m) = (
        bare["results"]["oos"]["ppl"].as_f64().unwrap(),
        mixed["results"]["oos"]["ppl"].as_f64().unwrap(),
    );
    assert_eq!(b, m);
    assert!(mixed["rows"].as_u64().unwrap() > 0);
}

#[test]
fn calibrate_writes_weights_and_trace() {
    let f = Fixture::new();
    let run = f.run("run", &[]);
    let out = f.path("cal");
    let summary = ok(&[
        "calibrate", "--out", s(&out), "--lm", s(&f.path("lm/lm.bin")), "--state", s(&run), "--manifest",
        s(&f.path("data/manifest.tsv")), "--epochs", "2", "--width", "8",
    ]);
    assert!(summary["examples"].as_u64().unwrap() > 0);
    assert!(out.join("calibrator.bin").is_file());
    // Header, the starting weights, then one row per epoch.
    assert_eq!(fs::read_to_string(out.join("calibration_trace.csv")).unwrap().lines().count(), 1 + 1 + 2);
}

#[test]
fn prepare_batches_chronologically() {
    let dir = TempDir::new().unwrap();
    let corpus = dir.path().join("corpus.txt");
    let lines: Vec<String> = (0..100).map(|i| format!("line {i} w{}", i % 7)).collect();
    fs::write(&corpus, lines.join("\n")).unwrap();
    let out = dir.path().join("prep");
    let args = ["prepare", "--out", s(&out), "--corpus", s(&corpus), "--batches", "10", "--split", "0.6,0.2,0.2"];
    ok(&args);

    let read = |b: usize, split: &str| -> Vec<String> {
        fs::read_to_string(out.join(format!("batches/{b:04}/{split}.txt")))
            .unwrap()
            .lines()
            .map(str::to_owned)
            .collect()
    };
    for b in 0..10 {
        let (train, valid, test) = (read(b, "train"), read(b, "valid"), read(b, "test"));
        assert_eq!((train.len(), valid.len(), test.len()), (6, 2, 2), "batch {b}");
        let mut all: Vec<&String> = train.iter().chain(&valid).chain(&test).collect();
        let index = |l: &String| lines.iter().position(|x| x == l).unwrap();
        for split in [&train, &valid, &test] {
            assert!(split.windows(2).all(|w| index(&w[0]) < index(&w[1])), "order within batch {b}");
        }
        all.sort_by_key(|l| index(l));
        let expected: Vec<&String> = lines[b * 10..(b + 1) * 10].iter().collect();
        assert_eq!(all, expected, "batch {b} covers its own lines");
    }
    let manifest = fs::read(out.join("manifest.tsv")).unwrap();
    ok(&args);
    assert_eq!(fs::read(out.join("manifest.tsv")).unwrap(), manifest);
    let vocab = fs::read_to_string(out.join("vocab.txt")).unwrap();
    assert_eq!(vocab.lines().next(), Some("<unk>"));
}

#[test]
fn flags_override_config_file() {
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("semem.conf");
    fs::write(&config, "seed = 9\n[synth]\nbatches = 2\ntrain_tokens = 500\nvalid_tokens = 100\ntest_tokens = 100\nbase_tokens = 500\nout_of_stream_tokens = 100 # tiny\n").unwrap();
    let a = dir.path().join("a");
    let summary = ok(&["synth", "--config", s(&config), "--out", s(&a)]);
    assert_eq!(summary["batches"], 2);
    let b = dir.path().join("b");
    let summary = ok(&["synth", "--config", s(&config), "--out", s(&b), "--batches", "4"]);
    assert_eq!(summary["batches"], 4);
    assert_eq!(
        fs::read(a.join("batches/0000/train.txt")).unwrap(),
        fs::read(b.join("batches/0000/train.txt")).unwrap(),
        "seed comes from the config in both runs"
    );
    let c = dir.path().join("c");
    ok(&["synth", "--config", s(&config), "--out", s(&c), "--seed", "10", "--batches", "2"]);
    assert_ne!(fs::read(a.join("base.txt")).unwrap(), fs::read(c.join("base.txt")).unwrap());

    fs::write(&config, "[synth]\nbogus = 1\n").unwrap();
    assert_eq!(semem(&["synth", "--config", s(&config), "--out", s(&c)]).status.code(), Some(1));
}
