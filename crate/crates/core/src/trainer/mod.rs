//! Training loops: a plain attention baseline, three distillation baselines
//! (teacher–student, co-training, mutual learning), and the sharded
//! bidirectional-distillation group trainer.
//!
//! Shared contracts across every strategy:
//! - Adam (β₁ 0.9, β₂ 0.999, ε 1e-8) with per-student global-norm clipping.
//! - Fixed epoch budget plus early stopping on validation NLL (group mean
//!   when several students train together), patience measured in epochs;
//!   the returned group is the state from its best validation epoch.
//! - Every random choice is drawn from a named [`SeedTree`] stream, so one
//!   `(config, seed)` pair reproduces a run bitwise at any worker count.
//! - A non-finite loss or gradient aborts with [`Error::Diverged`].
//! - Validation reuses [`eval::test_nll`], the same scorer the final
//!   metrics report uses.

mod adam;
mod strategies;

pub use adam::{clip_gradients, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use strategies::{mrbd_gradients, mrbd_objective, mrbd_step, supervised_step};

use crate::corpus::{Corpus, SubtaskPartition};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::eval;
use crate::model::{ModelConfig, ModelParams};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

// ── strategy ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Single student, NLL only.
    Plain,
    /// Teacher–student distillation: pre-train a teacher, freeze it, then
    /// train one student against its softened predictions.
    Kd,
    /// Co-training: pre-train two students, then alternate updates where
    /// each imitates the other's detached predictions.
    Ct,
    /// Mutual learning: N students on the full corpus, iterative updates,
    /// each imitating the ungated mean of the others' detached predictions.
    Dml,
    /// Sharded student group with gated bidirectional distillation and one
    /// simultaneous update per step.
    Mrbd,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Plain => "plain",
            Strategy::Kd => "kd",
            Strategy::Ct => "ct",
            Strategy::Dml => "dml",
            Strategy::Mrbd => "mrbd",
        }
    }

    /// Strategies that run a supervised warm-up phase before distilling.
    pub fn uses_pretraining(self) -> bool {
        matches!(self, Strategy::Kd | Strategy::Ct)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Strategy::Plain),
            "kd" => Ok(Strategy::Kd),
            "ct" => Ok(Strategy::Ct),
            "dml" => Ok(Strategy::Dml),
            "mrbd" => Ok(Strategy::Mrbd),
            other => Err(Error::config(format!(
                "unknown strategy {other:?} (expected plain|kd|ct|dml|mrbd)"
            ))),
        }
    }
}

// ── configuration ───────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub strategy: Strategy,
    /// Group size N. Fixed per strategy: plain 1, kd/ct 2, dml/mrbd ≥ 2.
    pub students: usize,
    /// Gate probability p for the per-peer Bernoulli masks (mrbd only).
    pub imitation_p: f64,
    /// Softening temperature for every distillation term.
    pub temperature: f64,
    pub lr: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Warm-up epochs for kd/ct; 0 means "same as `epochs`".
    pub pretrain_epochs: usize,
    /// Overlap ratio r for the subtask partition (mrbd only).
    pub overlap: f64,
    pub dropout: f64,
    pub label_smoothing: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Early-stop patience, in epochs without validation improvement.
    pub patience: usize,
    /// When false, peer forwards in the group objective are detached
    /// (gradients stop at the aggregate). Ablation switch.
    pub bidirectional: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            strategy: Strategy::Mrbd,
            students: 6,
            imitation_p: 0.5,
            temperature: 3.0,
            lr: 1e-4,
            clip_norm: 5.0,
            batch_size: 64,
            epochs: 30,
            pretrain_epochs: 0,
            overlap: 0.0,
            dropout: 0.1,
            label_smoothing: 0.0,
            weight_decay: 0.0,
            seed: 17,
            patience: 5,
            bidirectional: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        match self.strategy {
            Strategy::Plain if self.students != 1 => {
                return Err(Error::config(format!(
                    "plain trains exactly 1 student, got {}",
                    self.students
                )));
            }
            Strategy::Kd | Strategy::Ct if self.students != 2 => {
                return Err(Error::config(format!(
                    "{} needs exactly 2 models, got {}",
                    self.strategy, self.students
                )));
            }
            Strategy::Dml | Strategy::Mrbd if self.students < 2 => {
                return Err(Error::config(format!(
                    "{} needs at least 2 students, got {}",
                    self.strategy, self.students
                )));
            }
            _ => {}
        }
        if self.strategy == Strategy::Mrbd && !(self.imitation_p > 0.0 && self.imitation_p <= 1.0)
        {
            return Err(Error::config(format!(
                "imitation probability {} outside (0, 1]",
                self.imitation_p
            )));
        }
        if self.temperature <= 0.0 {
            return Err(Error::config(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        if self.lr <= 0.0 {
            return Err(Error::config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.clip_norm <= 0.0 {
            return Err(Error::config(format!(
                "clip norm {} must be positive",
                self.clip_norm
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epoch budget must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.overlap) {
            return Err(Error::config(format!("overlap ratio {} outside [0, 1]", self.overlap)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::config(format!(
                "label smoothing {} outside [0, 1)",
                self.label_smoothing
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config(format!(
                "weight decay {} must be non-negative",
                self.weight_decay
            )));
        }
        if self.patience == 0 {
            return Err(Error::config("patience must be at least 1 epoch"));
        }
        Ok(())
    }

    /// Warm-up budget: explicit `pretrain_epochs`, or `epochs` when unset.
    pub fn effective_pretrain_epochs(&self) -> usize {
        if self.pretrain_epochs == 0 {
            self.epochs
        } else {
            self.pretrain_epochs
        }
    }
}

// ── logging ─────────────────────────────────────────────────────────────

/// One per-student-per-epoch line of the training log (epochs are 1-based).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LogRow {
    pub epoch: usize,
    pub student: usize,
    pub train_nll: f64,
    pub train_distill: f64,
    pub val_nll: f64,
}

/// Wall-clock seconds per epoch, kept apart from the deterministic log so
/// that run outputs stay byte-comparable.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct EpochTiming {
    pub epoch: usize,
    pub seconds: f64,
}

/// Evidence row for update-ordering audits: which student consumed which
/// batch at which global step, and every student's parameter version at
/// the moment its distillation target (or group forward) was computed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepTrace {
    pub step: usize,
    pub student: usize,
    /// Corpus indices supervised in this term.
    pub batch: Vec<usize>,
    /// Parameter versions (updates applied so far) of all students, read
    /// when this term's forwards/targets were computed.
    pub peer_versions: Vec<u64>,
    /// Gate bits over the peer list (empty for ungated strategies).
    pub gate: Vec<bool>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
    pub timings: Vec<EpochTiming>,
    pub trace: Vec<StepTrace>,
    /// Total examples that contributed an NLL term, per student.
    pub supervised_counts: Vec<usize>,
    /// Warm-up updates applied before the main phase (kd/ct only).
    pub pretrain_steps: usize,
    /// Number of epochs actually run when early stopping fired.
    pub stopped_after: Option<usize>,
}

impl TrainingLog {
    /// Deterministic CSV (no wall-clock columns).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,student,train_nll,train_distill,val_nll\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6}\n",
                r.epoch, r.student, r.train_nll, r.train_distill, r.val_nll
            ));
        }
        out
    }

    /// Wall-clock CSV, intentionally separate from [`TrainingLog::to_csv`].
    pub fn timings_csv(&self) -> String {
        let mut out = String::from("epoch,seconds\n");
        for t in &self.timings {
            out.push_str(&format!("{},{:.3}\n", t.epoch, t.seconds));
        }
        out
    }
}

// ── outcome ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct TrainOutcome<E: Element> {
    pub students: Vec<ModelParams<E>>,
    /// The frozen teacher (kd only).
    pub teacher: Option<ModelParams<E>>,
    /// Index of the validation-best student.
    pub best: usize,
    /// Final validation NLL per student.
    pub val_nll: Vec<f64>,
    /// The subtask partition (mrbd only).
    pub partition: Option<SubtaskPartition>,
    pub log: TrainingLog,
}

/// Train a model group on `train`, validating on `valid`. The model's
/// dropout rate is taken from `cfg.dropout` (overriding `model_cfg`).
pub fn train<E: Element>(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    train: &Corpus,
    valid: &Corpus,
) -> Result<TrainOutcome<E>> {
    cfg.validate()?;
    let mut model_cfg = model_cfg.clone();
    model_cfg.dropout = cfg.dropout;
    model_cfg.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::config("training and validation corpora must be non-empty"));
    }
    for (name, corpus) in [("train", train), ("valid", valid)] {
        let bound = corpus.max_id_bound() as usize;
        if bound > model_cfg.vocab_size {
            return Err(Error::config(format!(
                "{name} corpus uses token ids up to {} but the vocabulary holds {}",
                bound - 1,
                model_cfg.vocab_size
            )));
        }
    }
    strategies::run(cfg, &model_cfg, train, valid)
}

/// Validation-NLL argmin over a group; ties go to the lowest index.
pub fn select_best_student<E: Element>(
    students: &[ModelParams<E>],
    valid: &Corpus,
) -> Result<(usize, Vec<f64>)> {
    if students.is_empty() {
        return Err(Error::config("cannot select from an empty student group"));
    }
    let scores: Vec<f64> = students
        .iter()
        .map(|s| eval::test_nll(s, valid))
        .collect::<Result<_>>()?;
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s < scores[best] {
            best = i;
        }
    }
    Ok((best, scores))
}

// ── early stopping ──────────────────────────────────────────────────────

/// Patience counter over the per-epoch validation score.
pub(crate) struct EarlyStopper {
    best: f64,
    best_epoch: usize,
    patience: usize,
}

impl EarlyStopper {
    pub(crate) fn new(patience: usize) -> Self {
        EarlyStopper { best: f64::INFINITY, best_epoch: 0, patience }
    }

    /// Feed one epoch's score (epochs 0-based); true means stop now.
    pub(crate) fn observe(&mut self, epoch: usize, score: f64) -> bool {
        if score < self.best {
            self.best = score;
            self.best_epoch = epoch;
        }
        epoch - self.best_epoch >= self.patience
    }
}
