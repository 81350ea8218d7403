//! Run reports and artifact hashing.
//!
//! Every command writes a `report.json` describing the run: the command, the
//! full config snapshot, command-specific arguments, SHA-256 hashes of every
//! input file, scalar results, and the emitted artifacts with their hashes.
//! The report is fully deterministic — wall-clock time lives in a separate
//! timing CSV the report only points at — so rerunning a command byte-for-byte
//! reproduces it, and `mrbd report replay` can re-execute a run from nothing
//! but this file and the original inputs.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;
use std::time::Duration;

use mrbd_core::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const REPORT_FILE: &str = "report.json";
pub const TIMING_FILE: &str = "timing.csv";

/// One emitted file, path relative to the output directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    /// Which subcommand produced this report.
    pub command: String,
    /// Full resolved [`crate::config::RunConfig`] snapshot (empty for
    /// `prepare`, which has no run config).
    pub config: BTreeMap<String, String>,
    /// Command-specific arguments (axis, mode, prepare source, …).
    pub args: BTreeMap<String, String>,
    /// SHA-256 per input file, keyed by the path as given.
    pub inputs: BTreeMap<String, String>,
    /// Scalar results (losses, metrics, counters).
    pub metrics: BTreeMap<String, f64>,
    /// Emitted files in emission order, hashed.
    pub artifacts: Vec<ArtifactRecord>,
    /// Where wall-clock timing went; kept out of this file so reruns are
    /// byte-identical.
    pub timing_path: String,
}

impl RunReport {
    pub fn new(command: &str, config: BTreeMap<String, String>) -> Self {
        RunReport {
            command: command.to_string(),
            config,
            args: BTreeMap::new(),
            inputs: BTreeMap::new(),
            metrics: BTreeMap::new(),
            artifacts: Vec::new(),
            timing_path: TIMING_FILE.to_string(),
        }
    }

    /// Hash `out_dir/rel` and append it to the artifact list.
    pub fn record_artifact(&mut self, out_dir: &Path, rel: &str) -> Result<()> {
        let sha256 = sha256_file(&out_dir.join(rel))?;
        self.artifacts.push(ArtifactRecord { path: rel.to_string(), sha256 });
        Ok(())
    }

    /// Serialize to pretty JSON (sorted maps, fixed array order, trailing
    /// newline) — byte-stable across reruns.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::config(format!("cannot serialize run report: {e}")))?;
        text.push('\n');
        write_text(path, &text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: e.line(),
            detail: e.to_string(),
        })
    }
}

// ── helpers ─────────────────────────────────────────────────────────────

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file =
        std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = file.read(&mut buf).map_err(|e| Error::io(path.display().to_string(), e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex(&hasher.finalize()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Write the timing CSV: any per-phase rows first, then the total wall time.
pub fn write_timing(out_dir: &Path, phase_rows: &str, wall: Duration) -> Result<()> {
    let mut text = if phase_rows.is_empty() {
        String::from("epoch,seconds\n")
    } else {
        phase_rows.to_string()
    };
    text.push_str(&format!("total,{:.3}\n", wall.as_secs_f64()));
    write_text(&out_dir.join(TIMING_FILE), &text)
}
