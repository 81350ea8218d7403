//! Command implementations and the shared CLI plumbing: exit-code-aware
//! errors, prepared-dataset loading, and on-disk naming conventions.
//!
//! Exit codes: 0 success, 2 usage/configuration error (raised before any
//! compute), 3 runtime failure (divergence, I/O, replay mismatch).

use std::collections::BTreeMap;
use std::path::Path;

use mrbd_core::corpus::{load_pairs, Corpus, Split, Vocabulary};
use mrbd_core::Error;

use crate::report::sha256_file;

pub mod ablate;
pub mod evaluate;
pub mod prepare;
pub mod replay;
pub mod sweep;
pub mod train;

// ── prepared dataset layout ─────────────────────────────────────────────

pub const TRAIN_FILE: &str = "train.pairs";
pub const VALID_FILE: &str = "valid.pairs";
pub const TEST_FILE: &str = "test.pairs";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const MANIFEST_FILE: &str = "manifest.json";

// ── errors with exit codes ──────────────────────────────────────────────

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

/// A failed command: what to print and which code to exit with.
#[derive(Debug)]
pub struct CliError {
    pub exit: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError { exit: EXIT_USAGE, message: message.into() }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        CliError { exit: EXIT_RUNTIME, message: message.into() }
    }
}

impl From<Error> for CliError {
    /// Bad configuration and unparseable files are usage errors; everything
    /// else (divergence, shape bugs, I/O, checkpoint damage) is runtime.
    fn from(e: Error) -> Self {
        let exit = match &e {
            Error::Config(_) | Error::Parse { .. } => EXIT_USAGE,
            _ => EXIT_RUNTIME,
        };
        CliError { exit, message: e.to_string() }
    }
}

pub type CmdResult<T> = std::result::Result<T, CliError>;

// ── dataset access ──────────────────────────────────────────────────────

/// A prepared dataset directory, loaded and encoded, with input hashes for
/// the run report.
pub struct Dataset {
    pub vocab: Vocabulary,
    pub train: Corpus,
    pub valid: Corpus,
    pub test: Corpus,
    /// SHA-256 per dataset file, keyed by path.
    pub inputs: BTreeMap<String, String>,
}

pub fn load_dataset(data_dir: &Path) -> CmdResult<Dataset> {
    if !data_dir.is_dir() {
        return Err(CliError::usage(format!(
            "dataset directory not found: {} (run `mrbd prepare` first)",
            data_dir.display()
        )));
    }
    let mut inputs = BTreeMap::new();
    for name in [VOCAB_FILE, TRAIN_FILE, VALID_FILE, TEST_FILE] {
        let path = data_dir.join(name);
        if !path.is_file() {
            return Err(CliError::usage(format!(
                "prepared dataset is missing {} (run `mrbd prepare` first)",
                path.display()
            )));
        }
        inputs.insert(path.display().to_string(), sha256_file(&path)?);
    }
    let vocab = Vocabulary::load(&data_dir.join(VOCAB_FILE))?;
    let train = load_pairs(&data_dir.join(TRAIN_FILE), Some(&vocab), Split::Train)?;
    let valid = load_pairs(&data_dir.join(VALID_FILE), Some(&vocab), Split::Valid)?;
    let test = load_pairs(&data_dir.join(TEST_FILE), Some(&vocab), Split::Test)?;
    Ok(Dataset { vocab, train, valid, test, inputs })
}

/// Resolve `data_dir` from the config, insisting it was provided.
pub fn require_data_dir(data_dir: &str) -> CmdResult<&Path> {
    if data_dir.is_empty() {
        return Err(CliError::usage(
            "no dataset configured: pass --data DIR or set data_dir in the config",
        ));
    }
    Ok(Path::new(data_dir))
}

pub fn ensure_out_dir(out_dir: &Path) -> CmdResult<()> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::from(Error::io(out_dir.display().to_string(), e)))
}
