//! Flat `key = value` config files with `[section]` headers. Keys before
//! any header are top-level (`seed`). Command-line flags override values
//! read here.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{io_at, CliError, CliResult};

const KNOWN: &[(&str, &[&str])] = &[
    ("", &["seed"]),
    ("prepare", &["batches", "vocab_size", "split"]),
    (
        "synth",
        &[
            "vocab_size",
            "branching",
            "zipf",
            "fact_pool",
            "fact_len",
            "fact_rate",
            "novelty",
            "batches",
            "train_tokens",
            "valid_tokens",
            "test_tokens",
            "base_tokens",
            "out_of_stream_tokens",
        ],
    ),
    ("lm", &["d", "m", "epochs", "learning_rate", "vocab_size"]),
    (
        "run",
        &[
            "policy",
            "delta",
            "p",
            "lambda",
            "fallback_lambda",
            "calibrate_decisions",
            "k",
            "nprobe",
            "n_centroids",
            "sample_size",
            "kmeans_iters",
            "calibration_fraction",
            "calibration_validation_fraction",
            "eval_every",
            "pilot_deltas",
        ],
    ),
    ("calibrator", &["width", "batch_size", "learning_rate", "epochs"]),
];

#[derive(Debug, Default, Clone)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Config {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => Self::parse(&io_at(p, std::fs::read_to_string(p))?)
                .map_err(|e| CliError::usage(format!("{}: {e}", p.display()))),
        }
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        let mut values = BTreeMap::new();
        let mut section = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| CliError::usage(format!("line {}: {msg}", n + 1));
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !KNOWN.iter().any(|(s, _)| *s == name) {
                    return Err(err(format!("unknown section [{name}]")));
                }
                section = name.to_owned();
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(err(format!("expected `key = value`, got {line:?}")));
            };
            let key = key.trim();
            let known = KNOWN
                .iter()
                .find(|(s, _)| *s == section)
                .is_some_and(|(_, keys)| keys.contains(&key));
            if !known {
                return Err(err(format!("unknown key {key:?} in section [{section}]")));
            }
            let full = if section.is_empty() {
                key.to_owned()
            } else {
                format!("{section}.{key}")
            };
            values.insert(full, value.trim().to_owned());
        }
        Ok(Self { values })
    }

    pub fn get<T: FromStr>(&self, key: &str) -> CliResult<Option<T>> {
        self.values
            .get(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| CliError::usage(format!("config value {key} = {v:?} is not valid")))
            })
            .transpose()
    }

    /// Flag value, else config value, else `default`.
    pub fn pick<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> CliResult<T> {
        Ok(match flag {
            Some(v) => v,
            None => self.get(key)?.unwrap_or(default),
        })
    }
}
