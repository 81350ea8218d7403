//! Vocabulary with reserved specials and frequency-ranked assignment.

use crate::corpus::{RawPair, TokenId};
use crate::error::{Error, Result};
use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

pub const PAD_ID: TokenId = 0;
pub const UNK_ID: TokenId = 1;
pub const BOS_ID: TokenId = 2;
pub const EOS_ID: TokenId = 3;

pub const SPECIALS: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

/// Token ↔ id map. Ids 0–3 are PAD/UNK/BOS/EOS; the rest are corpus tokens
/// ranked by training-set frequency with lexicographic tie-breaks, so the
/// assignment is a pure function of the corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Build from raw pairs; `cap` bounds the total size including the four
    /// reserved entries (tokens beyond the cap fall back to UNK on encode).
    pub fn build<'a>(pairs: impl Iterator<Item = &'a RawPair>, cap: usize) -> Result<Self> {
        if cap < SPECIALS.len() + 1 {
            return Err(Error::config(format!(
                "vocabulary cap {cap} leaves no room beyond the {} reserved tokens",
                SPECIALS.len()
            )));
        }
        let mut counts: HashMap<&'a str, u64> = HashMap::new();
        for pair in pairs {
            for tok in pair.history.iter().chain(&pair.response) {
                if SPECIALS.contains(&tok.as_str()) {
                    continue; // literal specials in text never claim a fresh id
                }
                *counts.entry(tok.as_str()).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
        // Most frequent first; ties resolved lexicographically for determinism.
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(cap - SPECIALS.len());

        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(ranked.into_iter().map(|(t, _)| t.to_string()));
        Ok(Self::from_tokens(tokens))
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Vocabulary { tokens, ids }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // the four reserved entries are always present
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .unwrap_or(SPECIALS[UNK_ID as usize])
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<TokenId> {
        tokens
            .iter()
            .map(|t| self.id(t).unwrap_or(UNK_ID))
            .collect()
    }

    pub fn decode_joined(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line, line number = id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(
            std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?,
        );
        for tok in &self.tokens {
            writeln!(out, "{tok}").map_err(|e| Error::io(path.display().to_string(), e))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file =
            std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut tokens = Vec::new();
        for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
            let tok = line.trim();
            if tok.is_empty() {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: i + 1,
                    detail: "empty vocabulary entry".into(),
                });
            }
            tokens.push(tok.to_string());
        }
        for (i, expect) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*expect) {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: i + 1,
                    detail: format!("expected reserved token `{expect}`"),
                });
            }
        }
        Ok(Self::from_tokens(tokens))
    }
}
