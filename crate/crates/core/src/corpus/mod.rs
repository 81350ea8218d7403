//! Dialogue corpora: TAB-separated pair files, length filtering, encoding.
//!
//! A pair file holds one `history<TAB>response` pair per line with
//! whitespace-separated tokens. Loading applies the length policy: pairs
//! whose response is shorter than [`MIN_RESPONSE_LEN`] tokens are dropped,
//! and both sides are truncated to their first [`MAX_TURN_LEN`] tokens.

pub mod noise;
pub mod partition;
pub mod synthetic;
pub mod vocab;

pub use noise::inject_noise;
pub use partition::{partition, SubtaskPartition};
pub use vocab::{Vocabulary, BOS_ID, EOS_ID, PAD_ID, UNK_ID};

use crate::error::{Error, Result};
use std::io::{BufRead, Write};
use std::path::Path;

/// Inclusive response-length window and history cap, in tokens.
pub const MIN_RESPONSE_LEN: usize = 5;
pub const MAX_TURN_LEN: usize = 25;

pub type TokenId = u32;

/// Which split a corpus belongs to. Purely a tag; it travels with the data
/// so logs and reports can name their source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Valid => write!(f, "valid"),
            Split::Test => write!(f, "test"),
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" | "validation" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::config(format!("unknown split `{other}`"))),
        }
    }
}

/// A pair with raw token strings (pre-vocabulary).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawPair {
    pub history: Vec<String>,
    pub response: Vec<String>,
}

impl RawPair {
    pub fn new(history: Vec<String>, response: Vec<String>) -> Self {
        RawPair { history, response }
    }

    #[cfg(test)]
    fn from_words(history: &[&str], response: &[&str]) -> Self {
        RawPair {
            history: history.iter().map(|s| s.to_string()).collect(),
            response: response.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// One encoded dialogue pair. The stored response carries neither BOS nor
/// EOS; the model adds those around decoding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DialoguePair {
    pub history: Vec<TokenId>,
    pub response: Vec<TokenId>,
}

/// An encoded corpus: every token id is `< vocab.len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub pairs: Vec<DialoguePair>,
    pub split: Split,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Highest token id + 1 referenced anywhere (for vocab consistency checks).
    pub fn max_id_bound(&self) -> u32 {
        self.pairs
            .iter()
            .flat_map(|p| p.history.iter().chain(&p.response))
            .copied()
            .max()
            .map(|m| m + 1)
            .unwrap_or(0)
    }
}

/// Apply the length policy to one raw pair. Returns `None` when the response
/// is too short after truncation.
fn apply_length_policy(mut pair: RawPair) -> Option<RawPair> {
    pair.history.truncate(MAX_TURN_LEN);
    pair.response.truncate(MAX_TURN_LEN);
    if pair.response.len() < MIN_RESPONSE_LEN {
        return None;
    }
    Some(pair)
}

/// Raw pairs straight from a file, after the length policy.
#[derive(Debug, Clone)]
pub struct RawCorpus {
    pub pairs: Vec<RawPair>,
    /// Lines read from the file.
    pub lines_read: usize,
    /// Pairs dropped because the response was shorter than the minimum.
    pub dropped_short: usize,
}

/// Read a TAB-separated pair file. A line is malformed (hard error, with its
/// 1-based line number) when it does not contain exactly one TAB or when
/// either side tokenizes to nothing.
pub fn load_raw_pairs(path: &Path) -> Result<RawCorpus> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let reader = std::io::BufReader::new(file);
    let mut pairs = Vec::new();
    let mut lines_read = 0;
    let mut dropped_short = 0;
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        lines_read += 1;
        let mut sides = line.split('\t');
        let (h, r) = match (sides.next(), sides.next(), sides.next()) {
            (Some(h), Some(r), None) => (h, r),
            _ => {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: i + 1,
                    detail: "expected exactly one TAB separating history and response".into(),
                })
            }
        };
        let history: Vec<String> = h.split_whitespace().map(str::to_string).collect();
        let response: Vec<String> = r.split_whitespace().map(str::to_string).collect();
        if history.is_empty() || response.is_empty() {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                detail: "history and response must both be non-empty".into(),
            });
        }
        match apply_length_policy(RawPair { history, response }) {
            Some(p) => pairs.push(p),
            None => dropped_short += 1,
        }
    }
    Ok(RawCorpus {
        pairs,
        lines_read,
        dropped_short,
    })
}

/// Encode raw pairs with a vocabulary (unknown tokens become UNK).
pub fn encode_pairs(raw: &[RawPair], vocab: &Vocabulary, split: Split) -> Corpus {
    let pairs = raw
        .iter()
        .map(|p| DialoguePair {
            history: vocab.encode(&p.history),
            response: vocab.encode(&p.response),
        })
        .collect();
    Corpus { pairs, split }
}

/// Load a pair file into an encoded corpus.
///
/// With `Some(vocab)` unknown tokens map to UNK. With `None` a full
/// (uncapped) vocabulary is built from the file itself first — useful for
/// self-contained experiments and round-trip tests.
pub fn load_pairs(path: &Path, vocab: Option<&Vocabulary>, split: Split) -> Result<Corpus> {
    let raw = load_raw_pairs(path)?;
    match vocab {
        Some(v) => Ok(encode_pairs(&raw.pairs, v, split)),
        None => {
            let v = Vocabulary::build(raw.pairs.iter(), usize::MAX)?;
            Ok(encode_pairs(&raw.pairs, &v, split))
        }
    }
}

/// Write an encoded corpus back to the TAB-separated format.
pub fn write_pairs(corpus: &Corpus, vocab: &Vocabulary, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?,
    );
    for pair in &corpus.pairs {
        writeln!(
            out,
            "{}\t{}",
            vocab.decode_joined(&pair.history),
            vocab.decode_joined(&pair.response)
        )
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

/// Write raw (string) pairs to the TAB-separated format.
pub fn write_raw_pairs(pairs: &[RawPair], path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?,
    );
    for pair in pairs {
        writeln!(out, "{}\t{}", pair.history.join(" "), pair.response.join(" "))
            .map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}
