//! The five training loops plus the group-objective step primitives.
//!
//! Stream names (all under the run's [`SeedTree`]):
//! - `init:{k}` / `init:teacher` — parameter initialisation;
//! - `partition` — the subtask split;
//! - `order:{phase}:{epoch}:{k}` — per-student batch shuffles, phase
//!   `pre` (warm-up) or `main`;
//! - `gate:{step}:{k}` — the per-step peer gate draw;
//! - `dropout:{phase}:{step}:{k}:{i}` — dropout masks when term owner `k`
//!   forwards model `i`. Names depend only on (step, owner, model), never
//!   on thread scheduling.

use super::adam::{clip_gradients, AdamState};
use super::{
    EarlyStopper, EpochTiming, LogRow, StepTrace, Strategy, TrainConfig, TrainOutcome, TrainingLog,
};
use crate::corpus::{partition, Corpus, DialoguePair};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::eval;
use crate::losses::{
    aggregate_peers, sample_gate, tape_aggregate, tape_js, tape_kd_kl, tape_nll,
    tape_scaled_probs, weight_decay_gradient, GateMask, LossBreakdown,
};
use crate::model::{
    step_distributions, BoundModel, GradientSet, Mode, ModelConfig, ModelParams,
    StepDistributions,
};
use crate::seeds::SeedTree;
use crate::tape::{Tape, TensorId};
use crate::tensor::TensorValue;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::time::Instant;

pub(super) fn run<E: Element>(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    train: &Corpus,
    valid: &Corpus,
) -> Result<TrainOutcome<E>> {
    let seeds = SeedTree::new(cfg.seed);
    match cfg.strategy {
        Strategy::Plain => run_single_set(cfg, model_cfg, train, valid, &seeds),
        Strategy::Kd => run_kd(cfg, model_cfg, train, valid, &seeds),
        Strategy::Ct => run_single_set(cfg, model_cfg, train, valid, &seeds),
        Strategy::Dml => run_single_set(cfg, model_cfg, train, valid, &seeds),
        Strategy::Mrbd => run_mrbd(cfg, model_cfg, train, valid, &seeds),
    }
}

// ── shared plumbing ─────────────────────────────────────────────────────

fn init_model<E: Element>(
    model_cfg: &ModelConfig,
    seeds: &SeedTree,
    name: &str,
) -> Result<ModelParams<E>> {
    ModelParams::init(model_cfg, &mut seeds.stream(&format!("init:{name}")))
}

/// Shuffle `indices` and cut them into batches of at most `batch_size`.
fn epoch_batches(
    indices: &[usize],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let mut order = indices.to_vec();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

fn batch_pairs<'a>(corpus: &'a Corpus, idx: &[usize]) -> Vec<&'a DialoguePair> {
    idx.iter().map(|&i| &corpus.pairs[i]).collect()
}

fn validate_group<E: Element>(students: &[ModelParams<E>], valid: &Corpus) -> Result<Vec<f64>> {
    students.iter().map(|s| eval::test_nll(s, valid)).collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn argmin(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x < xs[best] {
            best = i;
        }
    }
    best
}

fn check_finite<E: Element>(
    breakdown: &LossBreakdown,
    grads: &GradientSet<E>,
    at: (usize, usize, usize),
) -> Result<()> {
    if breakdown.is_finite() && grads.all_finite() {
        Ok(())
    } else {
        let (epoch, step, student) = at;
        Err(Error::Diverged { epoch, step, student })
    }
}

/// Per-epoch running means of the step loss breakdowns.
#[derive(Debug, Default, Clone, Copy)]
struct LossAccum {
    nll: f64,
    distill: f64,
    terms: usize,
}

impl LossAccum {
    fn add(&mut self, b: &LossBreakdown) {
        self.nll += b.nll;
        self.distill += b.distill;
        self.terms += 1;
    }

    fn mean_nll(&self) -> f64 {
        if self.terms == 0 { 0.0 } else { self.nll / self.terms as f64 }
    }

    fn mean_distill(&self) -> f64 {
        if self.terms == 0 { 0.0 } else { self.distill / self.terms as f64 }
    }
}

/// Group state at the best validation epoch so far. Training loops offer
/// every epoch's result and restore the winner at the end, so the returned
/// models are the early-stopping optimum rather than `patience` epochs past
/// it.
struct BestSnapshot<E: Element> {
    score: f64,
    students: Vec<ModelParams<E>>,
    vals: Vec<f64>,
}

impl<E: Element> BestSnapshot<E> {
    fn new() -> Self {
        BestSnapshot { score: f64::INFINITY, students: Vec::new(), vals: Vec::new() }
    }

    /// Same strict-improvement rule as [`EarlyStopper::observe`].
    fn offer(&mut self, score: f64, students: &[ModelParams<E>], vals: &[f64]) {
        if score < self.score {
            self.score = score;
            self.students = students.to_vec();
            self.vals = vals.to_vec();
        }
    }

    /// Swap the best group back in; falls back to the live state when no
    /// epoch ever completed.
    fn restore(self, students: &mut Vec<ModelParams<E>>, fallback: Vec<f64>) -> Vec<f64> {
        if self.students.is_empty() {
            return fallback;
        }
        *students = self.students;
        self.vals
    }
}

/// Validate, log one row per student, record the epoch's wall time, offer
/// the group to the best-epoch snapshot, and feed the early stopper with
/// the group-mean validation NLL.
#[allow(clippy::too_many_arguments)]
fn finish_epoch<E: Element>(
    log: &mut TrainingLog,
    stopper: &mut EarlyStopper,
    snap: &mut BestSnapshot<E>,
    students: &[ModelParams<E>],
    valid: &Corpus,
    epoch: usize,
    accums: &[LossAccum],
    started: Instant,
) -> Result<(Vec<f64>, bool)> {
    let vals = validate_group(students, valid)?;
    for (k, (acc, &v)) in accums.iter().zip(&vals).enumerate() {
        log.rows.push(LogRow {
            epoch: epoch + 1,
            student: k,
            train_nll: acc.mean_nll(),
            train_distill: acc.mean_distill(),
            val_nll: v,
        });
    }
    log.timings.push(EpochTiming { epoch: epoch + 1, seconds: started.elapsed().as_secs_f64() });
    let group_score = mean(&vals);
    snap.offer(group_score, students, &vals);
    let stop = stopper.observe(epoch, group_score);
    if stop {
        log.stopped_after = Some(epoch + 1);
    }
    Ok((vals, stop))
}

// ── single-model step primitives ────────────────────────────────────────

/// Gradient of the batch-mean NLL for one model (no update applied).
fn supervised_gradients<E: Element>(
    params: &ModelParams<E>,
    batch: &[&DialoguePair],
    cfg: &TrainConfig,
    dropout_rng: &mut ChaCha8Rng,
) -> Result<(GradientSet<E>, LossBreakdown)> {
    if batch.is_empty() {
        return Err(Error::config("cannot step on an empty batch"));
    }
    let mut tape = Tape::new();
    let model = BoundModel::bind(&mut tape, params);
    let mut mode = Mode::Train(dropout_rng);
    let mut acc: Option<TensorId> = None;
    for pair in batch {
        let pass = model.forward_teacher_forced(&mut tape, pair, &mut mode)?;
        let nll = tape_nll(&mut tape, pass.logits, &pass.targets, cfg.label_smoothing)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, nll)?,
            None => nll,
        });
    }
    let total = tape.scale(acc.expect("non-empty batch"), E::from_f64(1.0 / batch.len() as f64));
    let grads = tape.backward(total)?;
    let value = tape.value(total).data()[0].as_f64();
    Ok((
        model.gradients(&grads),
        LossBreakdown { nll: value, distill: 0.0, total: value },
    ))
}

/// One supervised (NLL-only) update: gradients, weight decay, clip, Adam.
/// `at` is (epoch, step, student) context for divergence reports.
pub fn supervised_step<E: Element>(
    params: &mut ModelParams<E>,
    adam: &mut AdamState<E>,
    batch: &[&DialoguePair],
    cfg: &TrainConfig,
    dropout_rng: &mut ChaCha8Rng,
    at: (usize, usize, usize),
) -> Result<LossBreakdown> {
    let (mut grads, breakdown) = supervised_gradients(params, batch, cfg, dropout_rng)?;
    check_finite(&breakdown, &grads, at)?;
    weight_decay_gradient(params, cfg.weight_decay, &mut grads);
    clip_gradients(&mut grads, cfg.clip_norm);
    adam.step(params, &grads, cfg.lr);
    Ok(breakdown)
}

/// One distillation update against fixed (detached) per-pair targets:
/// batch-mean NLL plus T²·batch-mean KL(target ‖ softened student).
fn distill_step<E: Element>(
    params: &mut ModelParams<E>,
    adam: &mut AdamState<E>,
    batch: &[&DialoguePair],
    targets: &[StepDistributions<E>],
    cfg: &TrainConfig,
    dropout_rng: &mut ChaCha8Rng,
    at: (usize, usize, usize),
) -> Result<LossBreakdown> {
    if batch.is_empty() || batch.len() != targets.len() {
        return Err(Error::config(format!(
            "batch of {} pairs vs {} distillation targets",
            batch.len(),
            targets.len()
        )));
    }
    let mut tape = Tape::new();
    let model = BoundModel::bind(&mut tape, params);
    let mut mode = Mode::Train(dropout_rng);
    let mut nll_acc: Option<TensorId> = None;
    let mut kl_acc: Option<TensorId> = None;
    for (pair, target) in batch.iter().zip(targets) {
        let pass = model.forward_teacher_forced(&mut tape, pair, &mut mode)?;
        let nll = tape_nll(&mut tape, pass.logits, &pass.targets, cfg.label_smoothing)?;
        let kl = tape_kd_kl(&mut tape, pass.logits, target, cfg.temperature)?;
        nll_acc = Some(match nll_acc {
            Some(a) => tape.add(a, nll)?,
            None => nll,
        });
        kl_acc = Some(match kl_acc {
            Some(a) => tape.add(a, kl)?,
            None => kl,
        });
    }
    let inv_b = E::from_f64(1.0 / batch.len() as f64);
    let nll_mean = tape.scale(nll_acc.expect("non-empty batch"), inv_b);
    let kl_mean = tape.scale(kl_acc.expect("non-empty batch"), inv_b);
    let weighted = tape.scale(kl_mean, E::from_f64(cfg.temperature * cfg.temperature));
    let total = tape.add(nll_mean, weighted)?;
    let raw = tape.backward(total)?;
    let mut grads = model.gradients(&raw);
    let breakdown = LossBreakdown {
        nll: tape.value(nll_mean).data()[0].as_f64(),
        distill: tape.value(kl_mean).data()[0].as_f64(),
        total: tape.value(total).data()[0].as_f64(),
    };
    check_finite(&breakdown, &grads, at)?;
    weight_decay_gradient(params, cfg.weight_decay, &mut grads);
    clip_gradients(&mut grads, cfg.clip_norm);
    adam.step(params, &grads, cfg.lr);
    Ok(breakdown)
}

/// Supervised warm-up on the full corpus, one model after another, with a
/// fixed epoch budget (no early stopping: the warm-up is a fixed-length
/// phase, not a convergence run).
fn pretrain<E: Element>(
    models: &mut [ModelParams<E>],
    adam: &mut [AdamState<E>],
    train: &Corpus,
    cfg: &TrainConfig,
    seeds: &SeedTree,
    log: &mut TrainingLog,
) -> Result<()> {
    let indices: Vec<usize> = (0..train.len()).collect();
    let mut step = 0usize;
    for epoch in 0..cfg.effective_pretrain_epochs() {
        for k in 0..models.len() {
            let mut order_rng = seeds.stream(&format!("order:pre:{epoch}:{k}"));
            for idx in epoch_batches(&indices, cfg.batch_size, &mut order_rng) {
                let batch = batch_pairs(train, &idx);
                let mut rng = seeds.stream(&format!("dropout:pre:{step}:{k}:{k}"));
                supervised_step(&mut models[k], &mut adam[k], &batch, cfg, &mut rng, (epoch, step, k))?;
                step += 1;
            }
        }
    }
    log.pretrain_steps = step;
    Ok(())
}

// ── full-set loops: plain, ct, dml (and kd's student phase) ─────────────

/// Main loop for the strategies whose students all train on the full
/// corpus: plain (no distillation), ct/dml (iterative peer distillation),
/// and kd's student phase (fixed teacher via `teacher`).
///
/// Iterative contract: within a step, student k's targets are computed
/// from the peers' *current* parameters, so earlier-indexed students have
/// already applied this step's update.
#[allow(clippy::too_many_arguments)]
fn full_set_loop<E: Element>(
    students: &mut Vec<ModelParams<E>>,
    adam: &mut [AdamState<E>],
    teacher: Option<&ModelParams<E>>,
    distill: bool,
    cfg: &TrainConfig,
    train: &Corpus,
    valid: &Corpus,
    seeds: &SeedTree,
    log: &mut TrainingLog,
) -> Result<Vec<f64>> {
    let n = students.len();
    let indices: Vec<usize> = (0..train.len()).collect();
    let mut versions = vec![0u64; n];
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut snap = BestSnapshot::new();
    let mut step = 0usize;
    let mut last_vals = vec![f64::INFINITY; n];
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let batch_lists: Vec<Vec<Vec<usize>>> = (0..n)
            .map(|k| {
                let mut rng = seeds.stream(&format!("order:main:{epoch}:{k}"));
                epoch_batches(&indices, cfg.batch_size, &mut rng)
            })
            .collect();
        let rounds = batch_lists.iter().map(Vec::len).max().unwrap_or(0);
        let mut accums = vec![LossAccum::default(); n];
        for round in 0..rounds {
            for k in 0..n {
                let Some(idx) = batch_lists[k].get(round) else { continue };
                let batch = batch_pairs(train, idx);
                log.trace.push(StepTrace {
                    step,
                    student: k,
                    batch: idx.clone(),
                    peer_versions: versions.clone(),
                    gate: Vec::new(),
                });
                let mut rng = seeds.stream(&format!("dropout:main:{step}:{k}:{k}"));
                let breakdown = if distill {
                    // Detached targets from the current peer (or teacher)
                    // parameters, softened at config temperature.
                    let targets: Vec<StepDistributions<E>> = {
                        let sources: Vec<&ModelParams<E>> = match teacher {
                            Some(t) => vec![t],
                            None => students
                                .iter()
                                .enumerate()
                                .filter(|&(i, _)| i != k)
                                .map(|(_, s)| s)
                                .collect(),
                        };
                        let all_on = GateMask::all_on(sources.len());
                        batch
                            .par_iter()
                            .map(|pair| {
                                let dists: Vec<StepDistributions<E>> = sources
                                    .iter()
                                    .map(|m| step_distributions(m, pair, cfg.temperature))
                                    .collect::<Result<_>>()?;
                                aggregate_peers(&dists, &all_on)
                            })
                            .collect::<Result<_>>()?
                    };
                    distill_step(
                        &mut students[k],
                        &mut adam[k],
                        &batch,
                        &targets,
                        cfg,
                        &mut rng,
                        (epoch, step, k),
                    )?
                } else {
                    supervised_step(&mut students[k], &mut adam[k], &batch, cfg, &mut rng, (epoch, step, k))?
                };
                versions[k] += 1;
                log.supervised_counts[k] += batch.len();
                accums[k].add(&breakdown);
            }
            step += 1;
        }
        let (vals, stop) =
            finish_epoch(log, &mut stopper, &mut snap, students, valid, epoch, &accums, started)?;
        last_vals = vals;
        if stop {
            break;
        }
    }
    Ok(snap.restore(students, last_vals))
}

/// plain / ct / dml: everything except kd's frozen teacher and mrbd's
/// sharded group step.
fn run_single_set<E: Element>(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    train: &Corpus,
    valid: &Corpus,
    seeds: &SeedTree,
) -> Result<TrainOutcome<E>> {
    let n = cfg.students;
    let mut students: Vec<ModelParams<E>> = (0..n)
        .map(|k| init_model(model_cfg, seeds, &k.to_string()))
        .collect::<Result<_>>()?;
    let mut adam: Vec<AdamState<E>> = students.iter().map(AdamState::new).collect();
    let mut log = TrainingLog { supervised_counts: vec![0; n], ..TrainingLog::default() };
    if cfg.strategy.uses_pretraining() {
        pretrain(&mut students, &mut adam, train, cfg, seeds, &mut log)?;
    }
    let distill = cfg.strategy != Strategy::Plain;
    let val_nll =
        full_set_loop(&mut students, &mut adam, None, distill, cfg, train, valid, seeds, &mut log)?;
    let best = argmin(&val_nll);
    Ok(TrainOutcome { students, teacher: None, best, val_nll, partition: None, log })
}

fn run_kd<E: Element>(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    train: &Corpus,
    valid: &Corpus,
    seeds: &SeedTree,
) -> Result<TrainOutcome<E>> {
    // Phase 1: supervised teacher warm-up, then freeze.
    let mut teacher_group = vec![init_model::<E>(model_cfg, seeds, "teacher")?];
    let mut teacher_adam = vec![AdamState::new(&teacher_group[0])];
    let mut log = TrainingLog { supervised_counts: vec![0], ..TrainingLog::default() };
    pretrain(&mut teacher_group, &mut teacher_adam, train, cfg, seeds, &mut log)?;
    let teacher = teacher_group.remove(0);
    let frozen_hash = teacher.content_hash();

    // Phase 2: one student distills from the frozen teacher.
    let mut students = vec![init_model::<E>(model_cfg, seeds, "0")?];
    let mut adam = vec![AdamState::new(&students[0])];
    let val_nll = full_set_loop(
        &mut students,
        &mut adam,
        Some(&teacher),
        true,
        cfg,
        train,
        valid,
        seeds,
        &mut log,
    )?;
    if teacher.content_hash() != frozen_hash {
        return Err(Error::config("teacher parameters changed while frozen"));
    }
    Ok(TrainOutcome {
        students,
        teacher: Some(teacher),
        best: 0,
        val_nll,
        partition: None,
        log,
    })
}

// ── the sharded group objective ─────────────────────────────────────────

/// One student's term of the group objective, differentiated on demand.
struct TermOutput<E: Element> {
    owner: usize,
    breakdown: LossBreakdown,
    /// `(student index, gradient of this term w.r.t. that student)`;
    /// the owner first, then each gated peer in ascending index order.
    grads: Vec<(usize, GradientSet<E>)>,
}

/// Build term n of the group objective on its own tape: batch-mean NLL on
/// student n's batch plus T²·batch-mean JS between the student and the
/// gated peer aggregate. With `cfg.bidirectional` the peers are bound on
/// the tape so JS gradients reach them; otherwise the aggregate enters as
/// a detached constant.
fn group_term<E: Element>(
    students: &[ModelParams<E>],
    n: usize,
    batch: &[&DialoguePair],
    gate: &GateMask,
    cfg: &TrainConfig,
    seeds: &SeedTree,
    step: usize,
    want_grads: bool,
) -> Result<TermOutput<E>> {
    if batch.is_empty() {
        return Err(Error::config("cannot build a term on an empty batch"));
    }
    let peers: Vec<usize> = (0..students.len()).filter(|&i| i != n).collect();
    if gate.bits().len() != peers.len() {
        return Err(Error::shape(
            "group_term",
            format!("{} gate bits for {} peers", gate.bits().len(), peers.len()),
        ));
    }
    let gated: Vec<usize> = peers
        .iter()
        .copied()
        .zip(gate.bits())
        .filter_map(|(i, &on)| on.then_some(i))
        .collect();
    if gated.is_empty() {
        return Err(Error::config("gate mask selected no peers"));
    }

    let mut tape = Tape::new();
    let own = BoundModel::bind(&mut tape, &students[n]);
    let peer_models: Vec<(usize, BoundModel<E>)> = if cfg.bidirectional {
        gated.iter().map(|&i| (i, BoundModel::bind(&mut tape, &students[i]))).collect()
    } else {
        Vec::new()
    };
    let mut own_rng = seeds.stream(&format!("dropout:main:{step}:{n}:{n}"));
    let mut peer_rngs: Vec<ChaCha8Rng> = gated
        .iter()
        .map(|&i| seeds.stream(&format!("dropout:main:{step}:{n}:{i}")))
        .collect();

    let mut nll_acc: Option<TensorId> = None;
    let mut js_acc: Option<TensorId> = None;
    for pair in batch {
        let mut mode = Mode::Train(&mut own_rng);
        let pass = own.forward_teacher_forced(&mut tape, pair, &mut mode)?;
        let nll = tape_nll(&mut tape, pass.logits, &pass.targets, cfg.label_smoothing)?;
        nll_acc = Some(match nll_acc {
            Some(a) => tape.add(a, nll)?,
            None => nll,
        });

        let p = tape_scaled_probs(&mut tape, pass.logits, cfg.temperature);
        let q = if cfg.bidirectional {
            let mut probs = Vec::with_capacity(peer_models.len());
            for ((_, peer), rng) in peer_models.iter().zip(peer_rngs.iter_mut()) {
                let mut peer_mode = Mode::Train(rng);
                let peer_pass = peer.forward_teacher_forced(&mut tape, pair, &mut peer_mode)?;
                probs.push(tape_scaled_probs(&mut tape, peer_pass.logits, cfg.temperature));
            }
            tape_aggregate(&mut tape, &probs)?
        } else {
            let dists: Vec<StepDistributions<E>> = gated
                .iter()
                .map(|&i| step_distributions(&students[i], pair, cfg.temperature))
                .collect::<Result<_>>()?;
            let agg = aggregate_peers(&dists, &GateMask::all_on(dists.len()))?;
            let v = agg.steps[0].len();
            let mut packed = TensorValue::zeros(vec![agg.len(), v]);
            for (j, row) in agg.steps.iter().enumerate() {
                packed.data_mut()[j * v..(j + 1) * v].copy_from_slice(row);
            }
            tape.constant(packed)
        };
        let js = tape_js(&mut tape, p, q)?;
        js_acc = Some(match js_acc {
            Some(a) => tape.add(a, js)?,
            None => js,
        });
    }

    let inv_b = E::from_f64(1.0 / batch.len() as f64);
    let nll_mean = tape.scale(nll_acc.expect("non-empty batch"), inv_b);
    let js_mean = tape.scale(js_acc.expect("non-empty batch"), inv_b);
    let weighted = tape.scale(js_mean, E::from_f64(cfg.temperature * cfg.temperature));
    let total = tape.add(nll_mean, weighted)?;
    let breakdown = LossBreakdown {
        nll: tape.value(nll_mean).data()[0].as_f64(),
        distill: tape.value(js_mean).data()[0].as_f64(),
        total: tape.value(total).data()[0].as_f64(),
    };
    let grads = if want_grads {
        let raw = tape.backward(total)?;
        let mut out = vec![(n, own.gradients(&raw))];
        for (i, peer) in &peer_models {
            out.push((*i, peer.gradients(&raw)));
        }
        out
    } else {
        Vec::new()
    };
    Ok(TermOutput { owner: n, breakdown, grads })
}

/// Value of the full group objective Σ_n (NLL_n + T²·JS_n) at the given
/// parameters. Pure in the parameters when dropout is zero, which makes
/// it the reference function for finite-difference probes.
pub fn mrbd_objective<E: Element>(
    students: &[ModelParams<E>],
    batches: &[Option<Vec<&DialoguePair>>],
    gates: &[Option<GateMask>],
    cfg: &TrainConfig,
    seeds: &SeedTree,
    step: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for n in 0..students.len() {
        if let (Some(batch), Some(gate)) = (&batches[n], &gates[n]) {
            let term = group_term(students, n, batch, gate, cfg, seeds, step, false)?;
            total += term.breakdown.total;
        }
    }
    Ok(total)
}

/// Per-student gradients of the full group objective, all terms evaluated
/// against the same parameter snapshot. Terms run in parallel; gradients
/// are reduced in fixed (term, student) order so results are independent
/// of thread scheduling. No update is applied.
#[allow(clippy::type_complexity)]
pub fn mrbd_gradients<E: Element>(
    students: &[ModelParams<E>],
    batches: &[Option<Vec<&DialoguePair>>],
    gates: &[Option<GateMask>],
    cfg: &TrainConfig,
    seeds: &SeedTree,
    epoch: usize,
    step: usize,
) -> Result<(Vec<GradientSet<E>>, Vec<Option<LossBreakdown>>)> {
    let n = students.len();
    if batches.len() != n || gates.len() != n {
        return Err(Error::shape(
            "mrbd_gradients",
            format!("{n} students, {} batches, {} gates", batches.len(), gates.len()),
        ));
    }
    let snapshot: Vec<u64> = students.iter().map(ModelParams::content_hash).collect();
    let terms: Vec<Option<TermOutput<E>>> = (0..n)
        .into_par_iter()
        .map(|k| -> Result<Option<TermOutput<E>>> {
            let (Some(batch), Some(gate)) = (&batches[k], &gates[k]) else {
                return Ok(None);
            };
            group_term(students, k, batch, gate, cfg, seeds, step, true).map(Some)
        })
        .collect::<Result<_>>()?;
    // Simultaneity contract: the forward/backward phase reads one frozen
    // snapshot of every student.
    let after: Vec<u64> = students.iter().map(ModelParams::content_hash).collect();
    if snapshot != after {
        return Err(Error::config("parameters changed during the group gradient phase"));
    }

    let mut grads: Vec<GradientSet<E>> =
        students.iter().map(GradientSet::zeros_like).collect();
    let mut breakdowns: Vec<Option<LossBreakdown>> = vec![None; n];
    for term in terms.into_iter().flatten() {
        check_finite(&term.breakdown, &term.grads[0].1, (epoch, step, term.owner))?;
        breakdowns[term.owner] = Some(term.breakdown);
        for (s, g) in &term.grads {
            grads[*s].add_assign(g);
        }
    }
    for (s, g) in grads.iter().enumerate() {
        if !g.all_finite() {
            return Err(Error::Diverged { epoch, step, student: s });
        }
    }
    Ok((grads, breakdowns))
}

/// One group step: gradients of all terms against the pre-update snapshot,
/// then weight decay, clipping, and one simultaneous Adam update for every
/// student (students without a batch this step still advance in lockstep).
#[allow(clippy::too_many_arguments)]
pub fn mrbd_step<E: Element>(
    students: &mut [ModelParams<E>],
    adam: &mut [AdamState<E>],
    versions: &mut [u64],
    batches: &[Option<Vec<&DialoguePair>>],
    gates: &[Option<GateMask>],
    cfg: &TrainConfig,
    seeds: &SeedTree,
    epoch: usize,
    step: usize,
) -> Result<Vec<Option<LossBreakdown>>> {
    if versions.windows(2).any(|w| w[0] != w[1]) {
        return Err(Error::config("group versions out of lockstep before a simultaneous update"));
    }
    let (mut grads, breakdowns) =
        mrbd_gradients(students, batches, gates, cfg, seeds, epoch, step)?;
    for (s, g) in grads.iter_mut().enumerate() {
        weight_decay_gradient(&students[s], cfg.weight_decay, g);
        clip_gradients(g, cfg.clip_norm);
    }
    for s in 0..students.len() {
        adam[s].step(&mut students[s], &grads[s], cfg.lr);
        versions[s] += 1;
    }
    Ok(breakdowns)
}

fn run_mrbd<E: Element>(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    train: &Corpus,
    valid: &Corpus,
    seeds: &SeedTree,
) -> Result<TrainOutcome<E>> {
    let n = cfg.students;
    let part = partition(train.len(), n, cfg.overlap, &mut seeds.stream("partition"))?;
    let mut students: Vec<ModelParams<E>> = (0..n)
        .map(|k| init_model(model_cfg, seeds, &k.to_string()))
        .collect::<Result<_>>()?;
    let mut adam: Vec<AdamState<E>> = students.iter().map(AdamState::new).collect();
    let mut versions = vec![0u64; n];
    let mut log = TrainingLog { supervised_counts: vec![0; n], ..TrainingLog::default() };
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut snap = BestSnapshot::new();
    let mut step = 0usize;
    let mut last_vals = vec![f64::INFINITY; n];

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let batch_lists: Vec<Vec<Vec<usize>>> = (0..n)
            .map(|k| {
                let mut rng = seeds.stream(&format!("order:main:{epoch}:{k}"));
                epoch_batches(&part.subsets[k], cfg.batch_size, &mut rng)
            })
            .collect();
        // An epoch runs until the largest subset is exhausted; students
        // whose subset ran out skip their own term but stay available as
        // peers, so supervision counts stay at |D^n| per epoch.
        let rounds = batch_lists.iter().map(Vec::len).max().unwrap_or(0);
        let mut accums = vec![LossAccum::default(); n];
        for round in 0..rounds {
            let mut batches: Vec<Option<Vec<&DialoguePair>>> = Vec::with_capacity(n);
            let mut gate_masks: Vec<Option<GateMask>> = Vec::with_capacity(n);
            for k in 0..n {
                match batch_lists[k].get(round) {
                    Some(idx) => {
                        batches.push(Some(batch_pairs(train, idx)));
                        let mut rng = seeds.stream(&format!("gate:{step}:{k}"));
                        gate_masks.push(Some(sample_gate(n, cfg.imitation_p, &mut rng)?));
                    }
                    None => {
                        batches.push(None);
                        gate_masks.push(None);
                    }
                }
            }
            for k in 0..n {
                if let (Some(idx), Some(gate)) = (batch_lists[k].get(round), &gate_masks[k]) {
                    log.trace.push(StepTrace {
                        step,
                        student: k,
                        batch: idx.clone(),
                        peer_versions: versions.clone(),
                        gate: gate.bits().to_vec(),
                    });
                }
            }
            let breakdowns = mrbd_step(
                &mut students,
                &mut adam,
                &mut versions,
                &batches,
                &gate_masks,
                cfg,
                seeds,
                epoch,
                step,
            )?;
            for k in 0..n {
                if let (Some(b), Some(batch)) = (&breakdowns[k], &batches[k]) {
                    accums[k].add(b);
                    log.supervised_counts[k] += batch.len();
                }
            }
            step += 1;
        }
        let (vals, stop) = finish_epoch(
            &mut log,
            &mut stopper,
            &mut snap,
            &students,
            valid,
            epoch,
            &accums,
            started,
        )?;
        last_vals = vals;
        if stop {
            break;
        }
    }
    let val_nll = snap.restore(&mut students, last_vals);
    let best = argmin(&val_nll);
    Ok(TrainOutcome {
        students,
        teacher: None,
        best,
        val_nll,
        partition: Some(part),
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::super::train;
    use super::*;
    use crate::corpus::Split;
    use crate::model::ModelConfig;
    use crate::tape::finite_difference_check;
    use rand::{Rng, SeedableRng};

    fn toy_model_cfg(vocab: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab,
            embed_dim: 3,
            hidden_dim: 3,
            enc_layers: 1,
            dec_layers: 1,
            dropout: 0.0,
            max_decode_len: 6,
        }
    }

    fn toy_corpus(m: usize, vocab: u32, seed: u64) -> Corpus {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pairs = (0..m)
            .map(|_| {
                let hl = rng.random_range(2..5usize);
                let rl = rng.random_range(1..4usize);
                DialoguePair {
                    history: (0..hl).map(|_| rng.random_range(4..vocab)).collect(),
                    response: (0..rl).map(|_| rng.random_range(4..vocab)).collect(),
                }
            })
            .collect();
        Corpus { pairs, split: Split::Train }
    }

    fn quick_cfg(strategy: Strategy, students: usize) -> TrainConfig {
        TrainConfig {
            strategy,
            students,
            imitation_p: 0.5,
            temperature: 2.0,
            lr: 1e-3,
            batch_size: 8,
            epochs: 2,
            pretrain_epochs: 1,
            dropout: 0.0,
            seed: 11,
            ..TrainConfig::default()
        }
    }

    fn hashes<E: Element>(outcome: &TrainOutcome<E>) -> Vec<u64> {
        outcome.students.iter().map(ModelParams::content_hash).collect()
    }

    #[test]
    fn plain_is_deterministic_and_skips_pretraining() {
        let corpus = toy_corpus(24, 12, 1);
        let valid = toy_corpus(6, 12, 2);
        let cfg = quick_cfg(Strategy::Plain, 1);
        let mcfg = toy_model_cfg(12);
        let a = train::<f32>(&cfg, &mcfg, &corpus, &valid).unwrap();
        let b = train::<f32>(&cfg, &mcfg, &corpus, &valid).unwrap();
        assert_eq!(hashes(&a), hashes(&b));
        assert_eq!(a.log.pretrain_steps, 0);
        // Full set every epoch, no early stop at 2 epochs of patience 5.
        assert_eq!(a.log.supervised_counts, vec![24 * 2]);
        assert_eq!(a.log.rows.len(), 2);

        let other = train::<f32>(&TrainConfig { seed: 99, ..cfg }, &mcfg, &corpus, &valid).unwrap();
        assert_ne!(hashes(&a), hashes(&other));
    }

    #[test]
    fn kd_pretrains_and_freezes_the_teacher() {
        let corpus = toy_corpus(20, 10, 3);
        let valid = toy_corpus(5, 10, 4);
        let mcfg = toy_model_cfg(10);
        let cfg = quick_cfg(Strategy::Kd, 2);
        let short = train::<f32>(&TrainConfig { epochs: 1, ..cfg.clone() }, &mcfg, &corpus, &valid).unwrap();
        let long = train::<f32>(&TrainConfig { epochs: 3, ..cfg }, &mcfg, &corpus, &valid).unwrap();
        assert!(short.log.pretrain_steps > 0);
        // The teacher depends only on the warm-up phase: training the
        // student longer must leave it bit-identical.
        assert_eq!(
            short.teacher.as_ref().unwrap().content_hash(),
            long.teacher.as_ref().unwrap().content_hash()
        );
        assert_ne!(
            long.teacher.as_ref().unwrap().content_hash(),
            long.students[0].content_hash()
        );
    }

    #[test]
    fn ct_updates_iteratively_with_independent_batches() {
        let corpus = toy_corpus(16, 10, 5);
        let valid = toy_corpus(4, 10, 6);
        let out = train::<f32>(&quick_cfg(Strategy::Ct, 2), &toy_model_cfg(10), &corpus, &valid).unwrap();
        assert!(out.log.pretrain_steps > 0);
        let mut saw_second = false;
        for row in &out.log.trace {
            let g = row.step as u64;
            if row.student == 0 {
                // Student 0 moves first: nobody has updated at this step yet.
                assert_eq!(row.peer_versions, vec![g, g]);
            } else {
                // Student 1 sees student 0's post-update parameters.
                assert_eq!(row.peer_versions, vec![g + 1, g]);
                saw_second = true;
            }
        }
        assert!(saw_second);
        // Batch streams are independent per student.
        let batches_of = |s: usize| -> Vec<Vec<usize>> {
            out.log.trace.iter().filter(|r| r.student == s).map(|r| r.batch.clone()).collect()
        };
        assert_ne!(batches_of(0), batches_of(1));
    }

    #[test]
    fn dml_recomputes_targets_after_each_peer_update() {
        let corpus = toy_corpus(18, 10, 7);
        let valid = toy_corpus(4, 10, 8);
        let cfg = TrainConfig { epochs: 1, ..quick_cfg(Strategy::Dml, 3) };
        let out = train::<f32>(&cfg, &toy_model_cfg(10), &corpus, &valid).unwrap();
        assert_eq!(out.log.pretrain_steps, 0);
        for row in &out.log.trace {
            let g = row.step as u64;
            for (i, &v) in row.peer_versions.iter().enumerate() {
                // Earlier-indexed students already applied this step's
                // update when this row's targets were computed.
                let expect = if i < row.student { g + 1 } else { g };
                assert_eq!(v, expect, "step {g} student {} peer {i}", row.student);
            }
        }
    }

    #[test]
    fn mrbd_runs_deterministically_with_lockstep_versions() {
        let corpus = toy_corpus(30, 12, 9);
        let valid = toy_corpus(6, 12, 10);
        let cfg = TrainConfig { epochs: 2, students: 3, ..quick_cfg(Strategy::Mrbd, 3) };
        let mcfg = toy_model_cfg(12);
        let a = train::<f32>(&cfg, &mcfg, &corpus, &valid).unwrap();
        let b = train::<f32>(&cfg, &mcfg, &corpus, &valid).unwrap();
        assert_eq!(hashes(&a), hashes(&b));
        assert_eq!(a.log.pretrain_steps, 0);
        // Simultaneous updates: every term of a step reads the same
        // all-equal version vector.
        for row in &a.log.trace {
            assert_eq!(row.peer_versions, vec![row.step as u64; 3]);
            assert_eq!(row.gate.len(), 2);
            assert!(row.gate.iter().any(|&on| on));
        }
        // Supervision stays within each student's subset.
        let part = a.partition.as_ref().unwrap();
        let epochs_run = a.log.rows.iter().map(|r| r.epoch).max().unwrap();
        for (k, subset) in part.subsets.iter().enumerate() {
            assert_eq!(a.log.supervised_counts[k], subset.len() * epochs_run);
            for row in a.log.trace.iter().filter(|r| r.student == k) {
                assert!(row.batch.iter().all(|i| subset.contains(i)));
            }
        }
    }

    #[test]
    fn mrbd_gate_masks_vary_across_steps() {
        let corpus = toy_corpus(40, 12, 11);
        let valid = toy_corpus(6, 12, 12);
        let cfg = TrainConfig {
            epochs: 4,
            students: 3,
            batch_size: 4,
            ..quick_cfg(Strategy::Mrbd, 3)
        };
        let out = train::<f32>(&cfg, &toy_model_cfg(12), &corpus, &valid).unwrap();
        let gates: Vec<&Vec<bool>> = out.log.trace.iter().map(|r| &r.gate).collect();
        assert!(gates.len() > 10);
        assert!(gates.windows(2).any(|w| w[0] != w[1]), "gates never changed");
    }

    /// Identical students, full overlap, all gates on: every pairwise JS
    /// term is exactly zero and each student's first update equals a plain
    /// supervised update from the same initialisation, bit for bit.
    #[test]
    fn identical_students_step_like_the_plain_baseline() {
        let corpus = toy_corpus(12, 10, 13);
        let mcfg = toy_model_cfg(10);
        let seeds = SeedTree::new(5);
        let base: ModelParams<f32> =
            ModelParams::init(&mcfg, &mut seeds.stream("init:shared")).unwrap();
        let cfg = TrainConfig {
            strategy: Strategy::Mrbd,
            students: 3,
            imitation_p: 1.0,
            overlap: 1.0,
            temperature: 2.0,
            dropout: 0.0,
            batch_size: 4,
            ..TrainConfig::default()
        };

        let mut students = vec![base.clone(), base.clone(), base.clone()];
        let mut adam: Vec<AdamState<f32>> = students.iter().map(AdamState::new).collect();
        let mut versions = vec![0u64; 3];
        let all_pairs: Vec<&DialoguePair> = corpus.pairs.iter().collect();
        let batches: Vec<Option<Vec<&DialoguePair>>> = vec![
            Some(all_pairs[0..4].to_vec()),
            Some(all_pairs[4..8].to_vec()),
            Some(all_pairs[8..12].to_vec()),
        ];
        let gates = vec![Some(GateMask::all_on(2)), Some(GateMask::all_on(2)), Some(GateMask::all_on(2))];
        let breakdowns =
            mrbd_step(&mut students, &mut adam, &mut versions, &batches, &gates, &cfg, &seeds, 0, 0)
                .unwrap();
        for b in breakdowns.iter().flatten() {
            assert_eq!(b.distill, 0.0, "distillation loss must vanish exactly");
            assert_eq!(b.total, b.nll);
        }
        // Each student's update must equal the plain-NLL update on the
        // same batch, starting from the same parameters.
        for (k, batch) in batches.iter().enumerate() {
            let mut plain = base.clone();
            let mut plain_adam = AdamState::new(&plain);
            let mut rng = seeds.stream("unused-dropout");
            supervised_step(&mut plain, &mut plain_adam, batch.as_ref().unwrap(), &cfg, &mut rng, (0, 0, k))
                .unwrap();
            assert_eq!(plain, students[k], "student {k} diverged from the plain update");
        }
    }

    /// Finite differences over every parameter of a two-student group:
    /// the analytic gradients of Σ_n (NLL_n + T²·JS_n) must match, and the
    /// JS term must push gradients into the peer as well.
    #[test]
    fn two_student_group_objective_matches_finite_differences() {
        let mcfg = ModelConfig {
            vocab_size: 7,
            embed_dim: 2,
            hidden_dim: 2,
            enc_layers: 1,
            dec_layers: 1,
            dropout: 0.0,
            max_decode_len: 4,
        };
        let seeds = SeedTree::new(21);
        let students: Vec<ModelParams<f64>> = vec![
            ModelParams::init(&mcfg, &mut seeds.stream("init:a")).unwrap(),
            ModelParams::init(&mcfg, &mut seeds.stream("init:b")).unwrap(),
        ];
        let pairs = vec![
            DialoguePair { history: vec![4, 5], response: vec![6, 4] },
            DialoguePair { history: vec![6], response: vec![5] },
        ];
        let cfg = TrainConfig {
            strategy: Strategy::Mrbd,
            students: 2,
            imitation_p: 1.0,
            temperature: 2.0,
            dropout: 0.0,
            ..TrainConfig::default()
        };
        // Only student 0 owns a batch: gradient on student 1 then flows
        // exclusively through the bidirectional JS term.
        let batches: Vec<Option<Vec<&DialoguePair>>> =
            vec![Some(pairs.iter().collect()), None];
        let gates = vec![Some(GateMask::all_on(1)), None];
        let (grads, breakdowns) =
            mrbd_gradients(&students, &batches, &gates, &cfg, &seeds, 0, 0).unwrap();
        assert!(breakdowns[0].unwrap().distill > 0.0);
        assert!(breakdowns[1].is_none());
        let peer_norm = grads[1].global_norm();
        assert!(peer_norm > 1e-8, "peer received no gradient: {peer_norm}");

        for s in 0..2 {
            for i in 0..students[s].tensor_count() {
                let objective = |x: &TensorValue<f64>| -> Result<f64> {
                    let mut probe = students.clone();
                    *probe[s].tensor_at_mut(i) = x.clone();
                    mrbd_objective(&probe, &batches, &gates, &cfg, &seeds, 0)
                };
                let err = finite_difference_check(
                    objective,
                    students[s].tensor_at(i),
                    grads[s].tensor_at(i),
                    1e-5,
                )
                .unwrap();
                assert!(
                    err < 1e-4,
                    "student {s} tensor {i} ({}): rel err {err}",
                    students[s].names()[i]
                );
            }
        }
    }

    #[test]
    fn detached_variant_gives_unsupervised_peer_zero_gradient() {
        let mcfg = toy_model_cfg(8);
        let seeds = SeedTree::new(31);
        let students: Vec<ModelParams<f64>> = vec![
            ModelParams::init(&mcfg, &mut seeds.stream("init:a")).unwrap(),
            ModelParams::init(&mcfg, &mut seeds.stream("init:b")).unwrap(),
        ];
        let pair = DialoguePair { history: vec![4, 5], response: vec![6] };
        let cfg = TrainConfig {
            strategy: Strategy::Mrbd,
            students: 2,
            imitation_p: 1.0,
            bidirectional: false,
            dropout: 0.0,
            ..TrainConfig::default()
        };
        let batches: Vec<Option<Vec<&DialoguePair>>> = vec![Some(vec![&pair]), None];
        let gates = vec![Some(GateMask::all_on(1)), None];
        let (grads, breakdowns) =
            mrbd_gradients(&students, &batches, &gates, &cfg, &seeds, 0, 0).unwrap();
        assert!(breakdowns[0].unwrap().distill > 0.0);
        assert_eq!(grads[1].global_norm(), 0.0);
    }

    #[test]
    fn non_finite_parameters_abort_with_divergence() {
        let mcfg = toy_model_cfg(8);
        let seeds = SeedTree::new(41);
        let mut params: ModelParams<f32> =
            ModelParams::init(&mcfg, &mut seeds.stream("init:0")).unwrap();
        let out_b = params.names().iter().position(|n| n == "out.b").unwrap();
        params.tensor_at_mut(out_b).data_mut()[0] = f32::NAN;
        let mut adam = AdamState::new(&params);
        let pair = DialoguePair { history: vec![4], response: vec![5] };
        let cfg = TrainConfig { strategy: Strategy::Plain, students: 1, dropout: 0.0, ..TrainConfig::default() };
        let mut rng = seeds.stream("dropout");
        let err = supervised_step(&mut params, &mut adam, &[&pair], &cfg, &mut rng, (3, 7, 0))
            .unwrap_err();
        match err {
            Error::Diverged { epoch, step, student } => {
                assert_eq!((epoch, step, student), (3, 7, 0));
            }
            other => panic!("expected divergence, got {other}"),
        }
    }

    #[test]
    fn early_stopping_caps_the_epoch_count() {
        let corpus = toy_corpus(10, 10, 15);
        let valid = toy_corpus(4, 10, 16);
        // Zero learning rate: validation never improves after epoch 1, so
        // patience 2 stops the run at epoch 3.
        let cfg = TrainConfig {
            strategy: Strategy::Plain,
            students: 1,
            lr: 1e-12,
            epochs: 50,
            patience: 2,
            dropout: 0.0,
            batch_size: 8,
            seed: 1,
            ..TrainConfig::default()
        };
        let out = train::<f32>(&cfg, &toy_model_cfg(10), &corpus, &valid).unwrap();
        assert_eq!(out.log.stopped_after, Some(3));
        assert_eq!(out.log.rows.len(), 3);
    }

    #[test]
    fn training_returns_the_best_validation_epoch() {
        let corpus = toy_corpus(12, 10, 15);
        let valid = toy_corpus(4, 10, 16);
        // A deliberately unstable learning rate makes validation oscillate,
        // so the last epoch is not the best one.
        let cfg = TrainConfig {
            strategy: Strategy::Plain,
            students: 1,
            lr: 0.5,
            epochs: 12,
            patience: 50,
            dropout: 0.0,
            batch_size: 4,
            seed: 9,
            ..TrainConfig::default()
        };
        let out = train::<f32>(&cfg, &toy_model_cfg(10), &corpus, &valid).unwrap();
        let epoch_means: Vec<f64> = (1..=12)
            .map(|e| {
                let vals: Vec<f64> =
                    out.log.rows.iter().filter(|r| r.epoch == e).map(|r| r.val_nll).collect();
                vals.iter().sum::<f64>() / vals.len() as f64
            })
            .collect();
        let best = epoch_means.iter().cloned().fold(f64::INFINITY, f64::min);
        let last = *epoch_means.last().unwrap();
        assert!(best < last, "expected oscillation: best {best}, last {last}");
        // The outcome carries the best epoch's scores and parameters, not
        // the final ones; re-scoring the returned model reproduces them.
        assert_eq!(out.val_nll[0], best);
        assert_eq!(eval::test_nll(&out.students[0], &valid).unwrap(), best);
    }
}
