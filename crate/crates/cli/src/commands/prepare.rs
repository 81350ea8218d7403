//! `mrbd prepare` — build a dataset directory from a TAB-separated pair file
//! or the built-in synthetic generator: three pair files, a vocabulary, and a
//! split manifest. Byte-identical on rerun with the same arguments.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use mrbd_core::corpus::synthetic::{bank_size, generate, SyntheticSpec};
use mrbd_core::corpus::{load_raw_pairs, write_raw_pairs, RawPair, Vocabulary};
use mrbd_core::seeds::SeedTree;
use rand::seq::SliceRandom;

use super::{
    ensure_out_dir, CliError, CmdResult, MANIFEST_FILE, TEST_FILE, TRAIN_FILE, VALID_FILE,
    VOCAB_FILE,
};
use crate::report::{sha256_file, write_text, write_timing, RunReport, REPORT_FILE};

/// Flag-level arguments (prepare has no run config).
#[derive(Debug, Clone)]
pub struct PrepareParams {
    pub out_dir: PathBuf,
    /// TAB-separated pair file; `None` means synthetic.
    pub input: Option<PathBuf>,
    /// `train,valid,test` line counts.
    pub sizes: String,
    pub seed: u64,
    pub vocab_cap: usize,
    /// Off-template response rate (synthetic only).
    pub noise: f64,
    /// Templates drawn from the bank; 0 = all of them (synthetic only).
    pub templates: usize,
}

pub fn run(params: &PrepareParams) -> CmdResult<()> {
    let report = execute(params)?;
    println!("prepared dataset at {}", params.out_dir.display());
    for name in [TRAIN_FILE, VALID_FILE, TEST_FILE] {
        let count = report.metrics.get(&format!("pairs.{name}")).copied().unwrap_or(0.0);
        println!("  {name}: {count} pairs");
    }
    println!("  {}: {} tokens", VOCAB_FILE, report.metrics["vocab_size"]);
    Ok(())
}

pub fn execute(params: &PrepareParams) -> CmdResult<RunReport> {
    let started = Instant::now();
    let (a, b, c) = parse_sizes(&params.sizes)?;
    if params.input.is_some() && (params.noise != 0.0 || params.templates != 0) {
        return Err(CliError::usage("--noise and --templates apply only to --synthetic"));
    }

    let seeds = SeedTree::new(params.seed);
    let mut inputs = BTreeMap::new();
    let mut dropped_short = 0usize;
    let (train, valid, test): (Vec<RawPair>, Vec<RawPair>, Vec<RawPair>) =
        match &params.input {
            None => {
                let spec = SyntheticSpec {
                    templates: if params.templates == 0 { bank_size() } else { params.templates },
                    noise_rate: params.noise,
                    train: a,
                    valid: b,
                    test: c,
                };
                let mut rng = seeds.stream("synthetic");
                let corpora = generate(&spec, &mut rng)?;
                (corpora.train, corpora.valid, corpora.test)
            }
            Some(path) => {
                inputs.insert(path.display().to_string(), sha256_file(path)?);
                let raw = load_raw_pairs(path)?;
                dropped_short = raw.dropped_short;
                let mut pairs = raw.pairs;
                if pairs.len() < a + b + c {
                    return Err(CliError::usage(format!(
                        "{} provides {} usable pairs after filtering; --sizes needs {}",
                        path.display(),
                        pairs.len(),
                        a + b + c
                    )));
                }
                let mut rng = seeds.stream("split");
                pairs.shuffle(&mut rng);
                let test = pairs.split_off(a + b);
                let valid = pairs.split_off(a);
                (pairs, valid, test.into_iter().take(c).collect())
            }
        };

    let vocab = Vocabulary::build(train.iter(), params.vocab_cap)?;
    ensure_out_dir(&params.out_dir)?;
    write_raw_pairs(&train, &params.out_dir.join(TRAIN_FILE))?;
    write_raw_pairs(&valid, &params.out_dir.join(VALID_FILE))?;
    write_raw_pairs(&test, &params.out_dir.join(TEST_FILE))?;
    vocab.save(&params.out_dir.join(VOCAB_FILE))?;

    let source = params
        .input
        .as_ref()
        .map(|p| p.display().to_string())
        .unwrap_or_else(|| "synthetic".to_string());
    let manifest = serde_json::json!({
        "source": source,
        "seed": params.seed,
        "vocab_cap": params.vocab_cap,
        "vocab_size": vocab.len(),
        "noise": params.noise,
        "templates": params.templates,
        "dropped_short": dropped_short,
        "splits": {
            "train": { "file": TRAIN_FILE, "pairs": train.len() },
            "valid": { "file": VALID_FILE, "pairs": valid.len() },
            "test": { "file": TEST_FILE, "pairs": test.len() },
        },
    });
    write_text(
        &params.out_dir.join(MANIFEST_FILE),
        &format!("{:#}\n", manifest),
    )?;

    let mut report = RunReport::new("prepare", BTreeMap::new());
    report.args = BTreeMap::from(
        [
            ("source", source),
            ("sizes", params.sizes.clone()),
            ("seed", params.seed.to_string()),
            ("vocab_cap", params.vocab_cap.to_string()),
            ("noise", params.noise.to_string()),
            ("templates", params.templates.to_string()),
        ]
        .map(|(k, v)| (k.to_string(), v)),
    );
    report.inputs = inputs;
    report.metrics.insert(format!("pairs.{TRAIN_FILE}"), train.len() as f64);
    report.metrics.insert(format!("pairs.{TEST_FILE}"), test.len() as f64);
    report.metrics.insert(format!("pairs.{VALID_FILE}"), valid.len() as f64);
    report.metrics.insert("vocab_size".to_string(), vocab.len() as f64);
    report.metrics.insert("dropped_short".to_string(), dropped_short as f64);
    for name in [TRAIN_FILE, VALID_FILE, TEST_FILE, VOCAB_FILE, MANIFEST_FILE] {
        report.record_artifact(&params.out_dir, name)?;
    }
    report.save(&params.out_dir.join(REPORT_FILE))?;
    write_timing(&params.out_dir, "", started.elapsed())?;
    Ok(report)
}

/// Rebuild the parameters from a run report's `args` map (replay path).
pub fn params_from_args(args: &BTreeMap<String, String>, out_dir: &Path) -> CmdResult<PrepareParams> {
    let get = |k: &str| {
        args.get(k)
            .ok_or_else(|| CliError::usage(format!("prepare report is missing arg {k:?}")))
    };
    let source = get("source")?;
    let parse_err = |k: &str| CliError::usage(format!("prepare report has a bad {k:?} value"));
    Ok(PrepareParams {
        out_dir: out_dir.to_path_buf(),
        input: (source != "synthetic").then(|| PathBuf::from(source)),
        sizes: get("sizes")?.clone(),
        seed: get("seed")?.parse().map_err(|_| parse_err("seed"))?,
        vocab_cap: get("vocab_cap")?.parse().map_err(|_| parse_err("vocab_cap"))?,
        noise: get("noise")?.parse().map_err(|_| parse_err("noise"))?,
        templates: get("templates")?.parse().map_err(|_| parse_err("templates"))?,
    })
}

fn parse_sizes(sizes: &str) -> CmdResult<(usize, usize, usize)> {
    let parts: Vec<usize> = sizes
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| CliError::usage(format!("--sizes expects TRAIN,VALID,TEST integers, got {sizes:?}")))?;
    match parts.as_slice() {
        [a, b, c] if *a > 0 && *b > 0 && *c > 0 => Ok((*a, *b, *c)),
        [_, _, _] => Err(CliError::usage("--sizes requires all three splits to be non-empty")),
        _ => Err(CliError::usage(format!(
            "--sizes expects exactly three comma-separated counts, got {sizes:?}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_parse_and_reject() {
        assert_eq!(parse_sizes("200, 40,40").unwrap(), (200, 40, 40));
        assert!(parse_sizes("200,40").is_err());
        assert!(parse_sizes("200,40,0").is_err());
        assert!(parse_sizes("a,b,c").is_err());
    }

    #[test]
    fn synthetic_prepare_is_byte_identical_on_rerun() {
        let dir = tempfile::tempdir().unwrap();
        let params = PrepareParams {
            out_dir: dir.path().join("d1"),
            input: None,
            sizes: "30,8,8".to_string(),
            seed: 7,
            vocab_cap: 512,
            noise: 0.0,
            templates: 0,
        };
        let r1 = execute(&params).unwrap();
        let mut again = params.clone();
        again.out_dir = dir.path().join("d2");
        let r2 = execute(&again).unwrap();
        assert_eq!(r1.artifacts, r2.artifacts);
        assert_eq!(r1.metrics["pairs.train.pairs"], 30.0);
    }

    #[test]
    fn file_input_splits_with_requested_counts() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("raw.tsv");
        let mut text = String::new();
        for i in 0..50 {
            text.push_str(&format!("hello there number {i}\ta fine reply indeed number {i}\n"));
        }
        std::fs::write(&input, text).unwrap();
        let params = PrepareParams {
            out_dir: dir.path().join("out"),
            input: Some(input.clone()),
            sizes: "30,10,10".to_string(),
            seed: 3,
            vocab_cap: 512,
            noise: 0.0,
            templates: 0,
        };
        let report = execute(&params).unwrap();
        assert_eq!(report.metrics["pairs.train.pairs"], 30.0);
        assert_eq!(report.inputs.len(), 1);
        let lines = std::fs::read_to_string(params.out_dir.join(VALID_FILE)).unwrap();
        assert_eq!(lines.lines().count(), 10);

        // Asking for more pairs than the file holds is a usage error.
        let mut greedy = params;
        greedy.sizes = "45,10,10".to_string();
        assert_eq!(execute(&greedy).unwrap_err().exit, super::super::EXIT_USAGE);
    }

    #[test]
    fn params_round_trip_through_report_args() {
        let dir = tempfile::tempdir().unwrap();
        let params = PrepareParams {
            out_dir: dir.path().join("d"),
            input: None,
            sizes: "20,5,5".to_string(),
            seed: 11,
            vocab_cap: 256,
            noise: 0.25,
            templates: 4,
        };
        let report = execute(&params).unwrap();
        let back = params_from_args(&report.args, &params.out_dir).unwrap();
        assert_eq!(back.sizes, params.sizes);
        assert_eq!(back.seed, 11);
        assert_eq!(back.vocab_cap, 256);
        assert_eq!(back.noise, 0.25);
        assert_eq!(back.templates, 4);
        assert!(back.input.is_none());
    }
}
