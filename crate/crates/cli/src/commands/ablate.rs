//! `mrbd ablate` — retrain the mrbd group across one ablation axis with a
//! shared seed and tabulate the test metrics, one row per value.
//!
//! Axes: `overlap` (subtask ratio r), `imitation` (gate probability p), and
//! `mechanism` (`full`, `no_subtask` = r:1, `no_subgroup` = p:1.0,
//! `no_bidistill` = detached peer forwards). Every variant config is
//! validated before the first training run starts.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use mrbd_core::eval::MetricReport;
use mrbd_core::trainer::{self, Strategy, TrainOutcome};

use super::{ensure_out_dir, load_dataset, require_data_dir, CliError, CmdResult};
use crate::config::RunConfig;
use crate::report::{write_text, write_timing, RunReport, REPORT_FILE};

pub const ABLATION_CSV: &str = "ablation.csv";
pub const ABLATION_JSON: &str = "ablation.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Axis {
    Overlap,
    Imitation,
    Mechanism,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Overlap => "overlap",
            Axis::Imitation => "imitation",
            Axis::Mechanism => "mechanism",
        }
    }

    fn default_values(self) -> &'static str {
        match self {
            Axis::Overlap => "0,0.25,0.5,1.0",
            Axis::Imitation => "0.2,0.5,0.8",
            Axis::Mechanism => "full,no_subtask,no_subgroup,no_bidistill",
        }
    }
}

impl FromStr for Axis {
    type Err = CliError;

    fn from_str(s: &str) -> CmdResult<Self> {
        match s {
            "overlap" => Ok(Axis::Overlap),
            "imitation" => Ok(Axis::Imitation),
            "mechanism" => Ok(Axis::Mechanism),
            other => Err(CliError::usage(format!(
                "unknown ablation axis {other:?} (expected overlap|imitation|mechanism)"
            ))),
        }
    }
}

pub fn run(cfg: &RunConfig, out_dir: &Path, axis: Axis, values: Option<&str>) -> CmdResult<()> {
    let report = execute(cfg, out_dir, axis, values)?;
    println!(
        "ablation over {} ({} variants) written to {}/{}",
        axis.name(),
        report.args["values"].split(',').count(),
        out_dir.display(),
        ABLATION_CSV
    );
    Ok(())
}

pub fn execute(
    cfg: &RunConfig,
    out_dir: &Path,
    axis: Axis,
    values: Option<&str>,
) -> CmdResult<RunReport> {
    let data_dir = require_data_dir(&cfg.data_dir)?;
    mrbd_core::set_worker_threads(cfg.threads);

    // Build and validate every variant before any training happens.
    let values = values.unwrap_or_else(|| axis.default_values());
    let mut variants: Vec<(String, RunConfig)> = Vec::new();
    for raw in values.split(',') {
        let raw = raw.trim();
        let mut variant = cfg.clone();
        variant.train.strategy = Strategy::Mrbd;
        let label = match axis {
            Axis::Overlap => {
                let r = parse_axis_f64(axis, raw)?;
                variant.train.overlap = r;
                format!("{r}")
            }
            Axis::Imitation => {
                let p = parse_axis_f64(axis, raw)?;
                variant.train.imitation_p = p;
                format!("{p}")
            }
            Axis::Mechanism => {
                match raw {
                    "full" => {}
                    "no_subtask" => variant.train.overlap = 1.0,
                    "no_subgroup" => variant.train.imitation_p = 1.0,
                    "no_bidistill" => variant.train.bidirectional = false,
                    other => {
                        return Err(CliError::usage(format!(
                            "unknown mechanism variant {other:?} \
                             (expected full|no_subtask|no_subgroup|no_bidistill)"
                        )));
                    }
                }
                raw.to_string()
            }
        };
        variant.train.validate()?;
        variants.push((label, variant));
    }
    if variants.is_empty() {
        return Err(CliError::usage("ablation needs at least one value"));
    }

    let ds = load_dataset(data_dir)?;
    let model_cfg = cfg.model_config(ds.vocab.len());
    let started = Instant::now();

    let mut csv = String::from("value,test_nll,dist_1,dist_2,ent_1,ent_2,dis_1,dis_2\n");
    let mut rows_json = Vec::new();
    let mut report = RunReport::new("ablate", cfg.snapshot());
    for (label, variant) in &variants {
        let outcome: TrainOutcome<f32> =
            trainer::train(&variant.train, &model_cfg, &ds.train, &ds.valid)?;
        let m = MetricReport::compute(&outcome.students[outcome.best], &ds.train, &ds.test)?;
        let _ = writeln!(
            csv,
            "{label},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            m.test_nll, m.dist_1, m.dist_2, m.ent_1, m.ent_2, m.dis_1, m.dis_2
        );
        rows_json.push(serde_json::json!({
            "value": label,
            "test_nll": m.test_nll,
            "dist_1": m.dist_1,
            "dist_2": m.dist_2,
            "ent_1": m.ent_1,
            "ent_2": m.ent_2,
            "dis_1": m.dis_1,
            "dis_2": m.dis_2,
        }));
        report.metrics.insert(format!("{label}/test_nll"), m.test_nll);
        report.metrics.insert(format!("{label}/dist_1"), m.dist_1);
        report.metrics.insert(format!("{label}/ent_1"), m.ent_1);
        report.metrics.insert(format!("{label}/dis_1"), m.dis_1);
    }
    let wall = started.elapsed();

    ensure_out_dir(out_dir)?;
    write_text(&out_dir.join(ABLATION_CSV), &csv)?;
    let table = serde_json::Value::Array(rows_json);
    write_text(&out_dir.join(ABLATION_JSON), &format!("{table:#}\n"))?;

    report.args.insert("axis".into(), axis.name().to_string());
    report.args.insert(
        "values".into(),
        variants.iter().map(|(l, _)| l.as_str()).collect::<Vec<_>>().join(","),
    );
    report.inputs = ds.inputs;
    report.record_artifact(out_dir, ABLATION_CSV)?;
    report.record_artifact(out_dir, ABLATION_JSON)?;
    report.save(&out_dir.join(REPORT_FILE))?;
    write_timing(out_dir, "", wall)?;
    Ok(report)
}

fn parse_axis_f64(axis: Axis, raw: &str) -> CmdResult<f64> {
    raw.parse::<f64>().map_err(|_| {
        CliError::usage(format!("{} axis expects numeric values, got {raw:?}", axis.name()))
    })
}
