//! `mrbd train` — run one training strategy and persist everything: one
//! checkpoint per model (`teacher.ckpt` + `student_0.ckpt` for kd,
//! `student_{k}.ckpt` otherwise), the per-epoch log CSV, a group manifest for
//! mrbd, and the run report. Wall-clock goes to the timing CSV only.

use std::path::Path;
use std::time::Instant;

use mrbd_core::model::save_checkpoint;
use mrbd_core::trainer::{self, Strategy, TrainOutcome};

use super::{ensure_out_dir, load_dataset, require_data_dir, CmdResult};
use crate::config::RunConfig;
use crate::report::{write_text, write_timing, RunReport, REPORT_FILE};

pub const LOG_FILE: &str = "log.csv";
pub const GROUP_FILE: &str = "group.json";

pub fn run(cfg: &RunConfig, out_dir: &Path) -> CmdResult<()> {
    let report = execute(cfg, out_dir)?;
    let epochs = report.metrics["epochs_run"];
    let best = report.metrics["best_student"] as usize;
    println!(
        "trained strategy={} students={} for {epochs} epoch(s)",
        report.config["strategy"], report.config["students"]
    );
    println!("  best student {best}: validation NLL {:.6}", report.metrics["best_val_nll"]);
    for a in &report.artifacts {
        println!("  wrote {}/{}", out_dir.display(), a.path);
    }
    Ok(())
}

pub fn execute(cfg: &RunConfig, out_dir: &Path) -> CmdResult<RunReport> {
    let data_dir = require_data_dir(&cfg.data_dir)?;
    mrbd_core::set_worker_threads(cfg.threads);
    cfg.train.validate()?;
    let ds = load_dataset(data_dir)?;
    let model_cfg = cfg.model_config(ds.vocab.len());

    let started = Instant::now();
    let outcome: TrainOutcome<f32> =
        trainer::train(&cfg.train, &model_cfg, &ds.train, &ds.valid)?;
    let wall = started.elapsed();

    ensure_out_dir(out_dir)?;
    let mut report = RunReport::new("train", cfg.snapshot());
    report.inputs = ds.inputs;

    let mut checkpoints = Vec::new();
    if let Some(teacher) = &outcome.teacher {
        save_checkpoint(teacher, out_dir.join("teacher.ckpt"))?;
        checkpoints.push("teacher.ckpt".to_string());
    }
    for (k, student) in outcome.students.iter().enumerate() {
        let name = format!("student_{k}.ckpt");
        save_checkpoint(student, out_dir.join(&name))?;
        checkpoints.push(name);
    }
    for name in &checkpoints {
        report.record_artifact(out_dir, name)?;
    }

    write_text(&out_dir.join(LOG_FILE), &outcome.log.to_csv())?;
    report.record_artifact(out_dir, LOG_FILE)?;

    if cfg.train.strategy == Strategy::Mrbd {
        let part = outcome
            .partition
            .as_ref()
            .expect("mrbd training always produces a partition");
        let group = serde_json::json!({
            "students": outcome.students.len(),
            "best": outcome.best,
            "checkpoints": checkpoints,
            "val_nll": outcome.val_nll,
            "supervised_counts": outcome.log.supervised_counts,
            "partition": {
                "overlap": part.overlap,
                "corpus_len": part.corpus_len,
                "shards": part.shards,
                "subsets": part.subsets,
            },
        });
        write_text(&out_dir.join(GROUP_FILE), &format!("{group:#}\n"))?;
        report.record_artifact(out_dir, GROUP_FILE)?;
    }

    report.metrics.insert("best_student".into(), outcome.best as f64);
    report.metrics.insert("best_val_nll".into(), outcome.val_nll[outcome.best]);
    for (k, v) in outcome.val_nll.iter().enumerate() {
        report.metrics.insert(format!("val_nll.{k}"), *v);
    }
    let epochs_run = outcome.log.stopped_after.unwrap_or(cfg.train.epochs);
    report.metrics.insert("epochs_run".into(), epochs_run as f64);
    report.metrics.insert("pretrain_steps".into(), outcome.log.pretrain_steps as f64);
    for (k, n) in outcome.log.supervised_counts.iter().enumerate() {
        report.metrics.insert(format!("supervised_count.{k}"), *n as f64);
    }

    report.save(&out_dir.join(REPORT_FILE))?;
    write_timing(out_dir, &outcome.log.timings_csv(), wall)?;
    Ok(report)
}
