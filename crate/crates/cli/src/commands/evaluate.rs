//! `mrbd evaluate` — score one checkpoint on the test split: greedy decode,
//! Dist-1/2, Ent-1/2, Dis-1/2, and test NLL, written as CSV and JSON.

use std::path::Path;
use std::time::Instant;

use mrbd_core::eval::MetricReport;
use mrbd_core::model::{load_checkpoint, ModelParams};

use super::{ensure_out_dir, load_dataset, require_data_dir, CliError, CmdResult, Dataset};
use crate::config::RunConfig;
use crate::report::{sha256_file, write_text, write_timing, RunReport, REPORT_FILE};

pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_JSON: &str = "metrics.json";

pub fn run(cfg: &RunConfig, out_dir: &Path) -> CmdResult<()> {
    let report = execute(cfg, out_dir)?;
    println!("evaluated {} on the test split:", cfg.checkpoint);
    for (name, value) in &report.metrics {
        println!("  {name:<12} {value:.6}");
    }
    Ok(())
}

pub fn execute(cfg: &RunConfig, out_dir: &Path) -> CmdResult<RunReport> {
    let (params, ds) = load_model_and_data(cfg)?;

    let started = Instant::now();
    let metrics = MetricReport::compute(&params, &ds.train, &ds.test)?;
    let wall = started.elapsed();

    ensure_out_dir(out_dir)?;
    write_text(&out_dir.join(METRICS_CSV), &metrics.to_csv_string())?;
    let json = serde_json::to_string_pretty(&metrics)
        .expect("metric report serialization cannot fail");
    write_text(&out_dir.join(METRICS_JSON), &format!("{json}\n"))?;

    let mut report = RunReport::new("evaluate", cfg.snapshot());
    report.inputs = ds.inputs;
    report.inputs.insert(cfg.checkpoint.clone(), sha256_file(Path::new(&cfg.checkpoint))?);
    report.metrics.insert("test_nll".into(), metrics.test_nll);
    report.metrics.insert("dist_1".into(), metrics.dist_1);
    report.metrics.insert("dist_2".into(), metrics.dist_2);
    report.metrics.insert("ent_1".into(), metrics.ent_1);
    report.metrics.insert("ent_2".into(), metrics.ent_2);
    report.metrics.insert("dis_1".into(), metrics.dis_1);
    report.metrics.insert("dis_2".into(), metrics.dis_2);
    report.record_artifact(out_dir, METRICS_CSV)?;
    report.record_artifact(out_dir, METRICS_JSON)?;
    report.save(&out_dir.join(REPORT_FILE))?;
    write_timing(out_dir, "", wall)?;
    Ok(report)
}

/// Load the configured checkpoint and dataset, insisting they agree on the
/// vocabulary. Shared with `sweep --mode perturb`.
pub fn load_model_and_data(cfg: &RunConfig) -> CmdResult<(ModelParams<f32>, Dataset)> {
    if cfg.checkpoint.is_empty() {
        return Err(CliError::usage(
            "no checkpoint configured: pass --checkpoint FILE or set checkpoint in the config",
        ));
    }
    let ckpt = Path::new(&cfg.checkpoint);
    if !ckpt.is_file() {
        return Err(CliError::usage(format!("checkpoint not found: {}", ckpt.display())));
    }
    let data_dir = require_data_dir(&cfg.data_dir)?;
    mrbd_core::set_worker_threads(cfg.threads);
    let ds = load_dataset(data_dir)?;
    let params = load_checkpoint(ckpt)?;
    if params.config().vocab_size != ds.vocab.len() {
        return Err(CliError::usage(format!(
            "vocabulary mismatch: checkpoint was trained with {} tokens but the dataset has {}",
            params.config().vocab_size,
            ds.vocab.len()
        )));
    }
    Ok((params, ds))
}
