//! Flat `key=value` run configuration.
//!
//! One schema covers every data-bearing command: trainer and model settings,
//! the dataset path, and the sweep grids. Values come from (in order) the
//! built-in defaults, an optional `--config` file, repeatable `--set KEY=VALUE`
//! overrides, and finally the dedicated flags (`--data`, `--seed`, …). Unknown
//! keys are rejected everywhere. The output directory is deliberately *not*
//! part of the schema — it names a destination, not an experiment — so run
//! reports stay byte-identical no matter where artifacts land.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use mrbd_core::model::ModelConfig;
use mrbd_core::trainer::TrainConfig;
use mrbd_core::{Error, Result};

/// Documented schema: `(key, type, meaning)` for `--help` and the README.
pub const CONFIG_KEYS: &[(&str, &str, &str)] = &[
    ("data_dir", "path", "prepared dataset directory (from `prepare`)"),
    ("checkpoint", "path", "model checkpoint (`evaluate`, `sweep --mode perturb`)"),
    ("threads", "int ≥ 1", "worker-pool width; never affects results"),
    ("strategy", "plain|kd|ct|dml|mrbd", "training strategy"),
    ("students", "int", "group size (plain 1, kd/ct 2, dml/mrbd ≥ 2)"),
    ("imitation_p", "float (0,1]", "per-peer gate probability (mrbd)"),
    ("temperature", "float > 0", "distillation softening temperature"),
    ("lr", "float > 0", "Adam learning rate"),
    ("clip_norm", "float > 0", "global gradient-norm cap"),
    ("batch_size", "int ≥ 1", "examples per step"),
    ("epochs", "int ≥ 1", "epoch budget"),
    ("pretrain_epochs", "int", "kd/ct warm-up budget; 0 = same as epochs"),
    ("overlap", "float [0,1]", "subtask overlap ratio r (mrbd)"),
    ("dropout", "float [0,1)", "dropout rate"),
    ("label_smoothing", "float [0,1)", "NLL label smoothing"),
    ("weight_decay", "float ≥ 0", "decoupled L2 on gradients"),
    ("seed", "u64", "root seed for every random stream"),
    ("patience", "int ≥ 1", "early-stop patience in epochs"),
    ("bidirectional", "bool", "false detaches peer forwards (ablation)"),
    ("embed_dim", "int ≥ 1", "embedding width"),
    ("hidden_dim", "int ≥ 1", "GRU state width"),
    ("enc_layers", "int ≥ 1", "encoder depth"),
    ("dec_layers", "int ≥ 1", "decoder depth"),
    ("max_decode_len", "int ≥ 1", "greedy decode cap"),
    ("sigmas", "floats", "perturbation σ grid, comma-separated"),
    ("trials", "int ≥ 1", "perturbation trials per σ"),
    ("fractions", "floats", "label-noise fractions, comma-separated"),
];

/// Resolved configuration for `train`, `evaluate`, `ablate`, and `sweep`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data_dir: String,
    pub checkpoint: String,
    pub threads: usize,
    pub train: TrainConfig,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub max_decode_len: usize,
    pub sigmas: Vec<f64>,
    pub trials: usize,
    pub fractions: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        RunConfig {
            data_dir: String::new(),
            checkpoint: String::new(),
            threads: 2,
            train: TrainConfig::default(),
            embed_dim: model.embed_dim,
            hidden_dim: model.hidden_dim,
            enc_layers: model.enc_layers,
            dec_layers: model.dec_layers,
            max_decode_len: model.max_decode_len,
            sigmas: vec![0.0, 0.01, 0.05],
            trials: 10,
            fractions: vec![0.0, 0.25, 0.5],
        }
    }
}

impl RunConfig {
    /// Set one key from its string form. Unknown keys and unparseable values
    /// are configuration errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "data_dir" => self.data_dir = value.to_string(),
            "checkpoint" => self.checkpoint = value.to_string(),
            "threads" => {
                self.threads = parse_usize(key, value)?;
                if self.threads == 0 {
                    return Err(Error::config("threads must be at least 1"));
                }
            }
            "strategy" => self.train.strategy = value.parse()?,
            "students" => self.train.students = parse_usize(key, value)?,
            "imitation_p" => self.train.imitation_p = parse_f64(key, value)?,
            "temperature" => self.train.temperature = parse_f64(key, value)?,
            "lr" => self.train.lr = parse_f64(key, value)?,
            "clip_norm" => self.train.clip_norm = parse_f64(key, value)?,
            "batch_size" => self.train.batch_size = parse_usize(key, value)?,
            "epochs" => self.train.epochs = parse_usize(key, value)?,
            "pretrain_epochs" => self.train.pretrain_epochs = parse_usize(key, value)?,
            "overlap" => self.train.overlap = parse_f64(key, value)?,
            "dropout" => self.train.dropout = parse_f64(key, value)?,
            "label_smoothing" => self.train.label_smoothing = parse_f64(key, value)?,
            "weight_decay" => self.train.weight_decay = parse_f64(key, value)?,
            "seed" => {
                self.train.seed = value.parse::<u64>().map_err(|_| bad_value(key, value, "u64"))?
            }
            "patience" => self.train.patience = parse_usize(key, value)?,
            "bidirectional" => {
                self.train.bidirectional =
                    value.parse::<bool>().map_err(|_| bad_value(key, value, "bool"))?
            }
            "embed_dim" => self.embed_dim = parse_usize(key, value)?,
            "hidden_dim" => self.hidden_dim = parse_usize(key, value)?,
            "enc_layers" => self.enc_layers = parse_usize(key, value)?,
            "dec_layers" => self.dec_layers = parse_usize(key, value)?,
            "max_decode_len" => self.max_decode_len = parse_usize(key, value)?,
            "sigmas" => self.sigmas = parse_f64_list(key, value)?,
            "trials" => self.trials = parse_usize(key, value)?,
            "fractions" => self.fractions = parse_f64_list(key, value)?,
            other => {
                return Err(Error::config(format!(
                    "unknown config key {other:?} (run `mrbd train --help` or see the README schema)"
                )));
            }
        }
        Ok(())
    }

    /// Apply a config file: one `key=value` per line, `#` comments, blank
    /// lines ignored. Errors carry the 1-based line number.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: i + 1,
                    detail: format!("expected key=value, got {line:?}"),
                });
            };
            self.set(key.trim(), value.trim()).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                detail: e.to_string(),
            })?;
        }
        Ok(())
    }

    /// Apply `--set KEY=VALUE` overrides in the given order.
    pub fn apply_sets(&mut self, sets: &[String]) -> Result<()> {
        for s in sets {
            let Some((key, value)) = s.split_once('=') else {
                return Err(Error::config(format!("--set expects KEY=VALUE, got {s:?}")));
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Canonical snapshot of every key. `from_snapshot` inverts it exactly,
    /// which is what makes run reports replayable.
    pub fn snapshot(&self) -> BTreeMap<String, String> {
        let t = &self.train;
        let mut map = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            map.insert(k.to_string(), v);
        };
        put("data_dir", self.data_dir.clone());
        put("checkpoint", self.checkpoint.clone());
        put("threads", self.threads.to_string());
        put("strategy", t.strategy.name().to_string());
        put("students", t.students.to_string());
        put("imitation_p", t.imitation_p.to_string());
        put("temperature", t.temperature.to_string());
        put("lr", t.lr.to_string());
        put("clip_norm", t.clip_norm.to_string());
        put("batch_size", t.batch_size.to_string());
        put("epochs", t.epochs.to_string());
        put("pretrain_epochs", t.pretrain_epochs.to_string());
        put("overlap", t.overlap.to_string());
        put("dropout", t.dropout.to_string());
        put("label_smoothing", t.label_smoothing.to_string());
        put("weight_decay", t.weight_decay.to_string());
        put("seed", t.seed.to_string());
        put("patience", t.patience.to_string());
        put("bidirectional", t.bidirectional.to_string());
        put("embed_dim", self.embed_dim.to_string());
        put("hidden_dim", self.hidden_dim.to_string());
        put("enc_layers", self.enc_layers.to_string());
        put("dec_layers", self.dec_layers.to_string());
        put("max_decode_len", self.max_decode_len.to_string());
        put("sigmas", join_f64(&self.sigmas));
        put("trials", self.trials.to_string());
        put("fractions", join_f64(&self.fractions));
        map
    }

    /// Rebuild a config from a snapshot map (replay path).
    pub fn from_snapshot(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (k, v) in map {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    /// The model settings, with the vocabulary size taken from the dataset
    /// and dropout shared with the trainer key.
    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            dropout: self.train.dropout,
            max_decode_len: self.max_decode_len,
        }
    }
}

/// Render the schema as a help epilogue (`--help` on config-driven commands).
pub fn schema_help() -> String {
    let mut out = String::from("Config keys (file lines or --set KEY=VALUE):\n");
    for (key, ty, meaning) in CONFIG_KEYS {
        let _ = writeln!(out, "  {key:<16} {ty:<22} {meaning}");
    }
    out
}

fn bad_value(key: &str, value: &str, ty: &str) -> Error {
    Error::config(format!("config key `{key}`: cannot parse {value:?} as {ty}"))
}

fn parse_usize(key: &str, value: &str) -> Result<usize> {
    value.parse::<usize>().map_err(|_| bad_value(key, value, "integer"))
}

fn parse_f64(key: &str, value: &str) -> Result<f64> {
    value.parse::<f64>().map_err(|_| bad_value(key, value, "float"))
}

fn parse_f64_list(key: &str, value: &str) -> Result<Vec<f64>> {
    let items: Vec<f64> = value
        .split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|_| bad_value(key, value, "float list")))
        .collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(Error::config(format!("config key `{key}`: empty list")));
    }
    Ok(items)
}

/// Comma-join floats via `Display`, which round-trips f64 exactly.
pub fn join_f64(xs: &[f64]) -> String {
    let mut out = String::new();
    for (i, x) in xs.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        let _ = write!(out, "{x}");
    }
    out
}
