//! `mrbd sweep` — robustness harnesses. `noise` retrains the configured
//! strategy on increasingly corrupted training labels and scores each run on
//! the clean test split; `perturb` adds Gaussian noise to a trained
//! checkpoint's parameters and reports the loss per σ over repeated trials.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use mrbd_core::eval::{noise_sweep, perturb_sweep, test_nll, PerturbSpec};
use mrbd_core::seeds::SeedTree;
use mrbd_core::trainer::{self, TrainOutcome};

use super::{ensure_out_dir, load_dataset, require_data_dir, CliError, CmdResult};
use crate::config::{join_f64, RunConfig};
use crate::report::{write_text, write_timing, RunReport, REPORT_FILE};

pub const SWEEP_CSV: &str = "sweep.csv";
pub const SWEEP_JSON: &str = "sweep.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Mode {
    Noise,
    Perturb,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Noise => "noise",
            Mode::Perturb => "perturb",
        }
    }
}

impl FromStr for Mode {
    type Err = CliError;

    fn from_str(s: &str) -> CmdResult<Self> {
        match s {
            "noise" => Ok(Mode::Noise),
            "perturb" => Ok(Mode::Perturb),
            other => {
                Err(CliError::usage(format!("unknown sweep mode {other:?} (expected noise|perturb)")))
            }
        }
    }
}

pub fn run(cfg: &RunConfig, out_dir: &Path, mode: Mode) -> CmdResult<()> {
    execute(cfg, out_dir, mode)?;
    println!("{} sweep written to {}/{}", mode.name(), out_dir.display(), SWEEP_CSV);
    Ok(())
}

pub fn execute(cfg: &RunConfig, out_dir: &Path, mode: Mode) -> CmdResult<RunReport> {
    match mode {
        Mode::Noise => noise(cfg, out_dir),
        Mode::Perturb => perturb(cfg, out_dir),
    }
}

/// Full retrain per label-noise fraction; each run is scored on the clean
/// test split and its training log is kept alongside the sweep table.
fn noise(cfg: &RunConfig, out_dir: &Path) -> CmdResult<RunReport> {
    for &f in &cfg.fractions {
        if !f.is_finite() || !(0.0..=1.0).contains(&f) {
            return Err(CliError::usage(format!("noise fraction {f} outside [0, 1]")));
        }
    }
    let data_dir = require_data_dir(&cfg.data_dir)?;
    mrbd_core::set_worker_threads(cfg.threads);
    cfg.train.validate()?;
    let ds = load_dataset(data_dir)?;
    let model_cfg = cfg.model_config(ds.vocab.len());
    let seeds = SeedTree::new(cfg.train.seed);

    let started = Instant::now();
    let mut train_logs: Vec<String> = Vec::new();
    let rows = noise_sweep(&ds.train, &cfg.fractions, &seeds, |noisy| {
        let outcome: TrainOutcome<f32> =
            trainer::train(&cfg.train, &model_cfg, noisy, &ds.valid)?;
        train_logs.push(outcome.log.to_csv());
        test_nll(&outcome.students[outcome.best], &ds.test)
    })
    .map_err(CliError::from)?;
    let wall = started.elapsed();

    ensure_out_dir(out_dir)?;
    let mut csv = String::from("fraction,test_nll\n");
    for (fraction, loss) in &rows {
        let _ = writeln!(csv, "{fraction},{loss:.6}");
    }
    write_text(&out_dir.join(SWEEP_CSV), &csv)?;
    let json = serde_json::Value::Array(
        rows.iter()
            .map(|(f, l)| serde_json::json!({ "fraction": f, "test_nll": l }))
            .collect(),
    );
    write_text(&out_dir.join(SWEEP_JSON), &format!("{json:#}\n"))?;

    let mut report = RunReport::new("sweep", cfg.snapshot());
    report.args.insert("mode".into(), "noise".to_string());
    report.args.insert("fractions".into(), join_f64(&cfg.fractions));
    report.inputs = ds.inputs;
    report.record_artifact(out_dir, SWEEP_CSV)?;
    report.record_artifact(out_dir, SWEEP_JSON)?;
    for ((fraction, loss), log) in rows.iter().zip(&train_logs) {
        let name = format!("train_log_{fraction}.csv");
        write_text(&out_dir.join(&name), log)?;
        report.record_artifact(out_dir, &name)?;
        report.metrics.insert(format!("fraction={fraction}/test_nll"), *loss);
    }
    report.save(&out_dir.join(REPORT_FILE))?;
    write_timing(out_dir, "", wall)?;
    Ok(report)
}

/// Gaussian parameter perturbation of one trained checkpoint.
fn perturb(cfg: &RunConfig, out_dir: &Path) -> CmdResult<RunReport> {
    let spec = PerturbSpec { sigmas: cfg.sigmas.clone(), trials: cfg.trials };
    spec.validate()?;
    let (params, ds) = super::evaluate::load_model_and_data(cfg)?;
    let seeds = SeedTree::new(cfg.train.seed);

    let started = Instant::now();
    let rows = perturb_sweep(&params, &ds.test, &spec, &seeds)?;
    let wall = started.elapsed();

    ensure_out_dir(out_dir)?;
    let mut csv = String::from("sigma,mean_loss,std_loss\n");
    for row in &rows {
        let _ = writeln!(csv, "{},{:.6},{:.6}", row.sigma, row.mean_loss, row.std_loss);
    }
    write_text(&out_dir.join(SWEEP_CSV), &csv)?;
    let json = serde_json::to_string_pretty(&rows).expect("perturb rows serialize");
    write_text(&out_dir.join(SWEEP_JSON), &format!("{json}\n"))?;

    let mut report = RunReport::new("sweep", cfg.snapshot());
    report.args.insert("mode".into(), "perturb".to_string());
    report.args.insert("sigmas".into(), join_f64(&cfg.sigmas));
    report.args.insert("trials".into(), cfg.trials.to_string());
    report.inputs = ds.inputs;
    report
        .inputs
        .insert(cfg.checkpoint.clone(), crate::report::sha256_file(Path::new(&cfg.checkpoint))?);
    for row in &rows {
        report.metrics.insert(format!("sigma={}/mean_loss", row.sigma), row.mean_loss);
        report.metrics.insert(format!("sigma={}/std_loss", row.sigma), row.std_loss);
    }
    report.record_artifact(out_dir, SWEEP_CSV)?;
    report.record_artifact(out_dir, SWEEP_JSON)?;
    report.save(&out_dir.join(REPORT_FILE))?;
    write_timing(out_dir, "", wall)?;
    Ok(report)
}
