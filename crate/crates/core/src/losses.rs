//! Loss algebra: NLL, unidirectional KL distillation, gated peer
//! aggregation, fusion, and the bidirectional fused-divergence loss.
//!
//! Every quantity exists in two forms that agree numerically:
//!   * pure functions over [`StepDistributions`] — used by oracles, metrics,
//!     and anywhere no gradient is needed;
//!   * tape builders over logits nodes — used by the trainers. The builders
//!     keep gradients flowing into *both* sides of the fused divergence
//!     (that is what makes the mutual distillation bidirectional); one-way
//!     targets are passed in as detached constants instead.
//!
//! Reduction convention throughout: sum over decoding steps and vocabulary,
//! mean over batch items (the batch mean is composed by the trainer).

use crate::corpus::TokenId;
use crate::element::Element;
use crate::error::{Error, Result};
use crate::model::{GradientSet, ModelParams, StepDistributions};
use crate::tape::{Tape, TensorId};
use crate::tensor::TensorValue;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

// ── gate sampling ───────────────────────────────────────────────────────

/// Bernoulli peer-selection mask with the all-zero outcome resampled away.
#[derive(Debug, Clone, PartialEq)]
pub struct GateMask {
    bits: Vec<bool>,
    p: f64,
}

impl GateMask {
    /// Number of selected peers (always ≥ 1).
    pub fn h(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn is_on(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn probability(&self) -> f64 {
        self.p
    }

    /// The deterministic everyone-selected mask (used by the ungated mean).
    pub fn all_on(n_peers: usize) -> GateMask {
        GateMask {
            bits: vec![true; n_peers],
            p: 1.0,
        }
    }
}

/// Draw one gate mask over a student's `n_students − 1` peers: independent
/// Bernoulli(p) bits, resampling the whole mask until at least one peer is
/// selected.
pub fn sample_gate(n_students: usize, p: f64, rng: &mut ChaCha8Rng) -> Result<GateMask> {
    if n_students < 2 {
        return Err(Error::config(format!(
            "gating needs at least 2 students, got {n_students}"
        )));
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::config(format!(
            "imitation probability {p} outside (0, 1]"
        )));
    }
    let n_peers = n_students - 1;
    loop {
        let bits: Vec<bool> = (0..n_peers).map(|_| rng.random_range(0.0..1.0) < p).collect();
        if bits.iter().any(|&b| b) {
            return Ok(GateMask { bits, p });
        }
    }
}

// ── pure distribution algebra ───────────────────────────────────────────

fn check_same_shape<E: Element>(
    op: &'static str,
    a: &StepDistributions<E>,
    b: &StepDistributions<E>,
) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(
            op,
            format!("{} steps vs {} steps", a.len(), b.len()),
        ));
    }
    for (j, (x, y)) in a.steps.iter().zip(&b.steps).enumerate() {
        if x.len() != y.len() {
            return Err(Error::shape(
                op,
                format!("step {j}: |V| {} vs {}", x.len(), y.len()),
            ));
        }
    }
    Ok(())
}

/// One row of KL divergence with the shared log clamp: Σ p·(ln p − ln q).
fn kl_row<E: Element>(p: &[E], q: &[E]) -> E {
    let mut acc = E::zero();
    for (&pi, &qi) in p.iter().zip(q) {
        acc += pi * (pi.ln_clamped() - qi.ln_clamped());
    }
    acc
}

/// Negative log-likelihood of a target sequence: −Σ_j ln p_j(y_j), natural
/// log, summed (not averaged) over steps.
pub fn nll_loss<E: Element>(dists: &StepDistributions<E>, targets: &[TokenId]) -> Result<E> {
    if dists.len() != targets.len() {
        return Err(Error::shape(
            "nll_loss",
            format!("{} steps vs {} targets", dists.len(), targets.len()),
        ));
    }
    let mut acc = E::zero();
    for (row, &t) in dists.steps.iter().zip(targets) {
        let t = t as usize;
        if t >= row.len() {
            return Err(Error::config(format!(
                "target {t} outside vocabulary of {}",
                row.len()
            )));
        }
        acc -= row[t].ln_clamped();
    }
    Ok(acc)
}

/// Cross-entropy against the smoothed target (1−ε)·one-hot + ε/|V|.
/// ε = 0 reduces to [`nll_loss`] exactly.
pub fn label_smoothing_loss<E: Element>(
    dists: &StepDistributions<E>,
    targets: &[TokenId],
    epsilon: f64,
) -> Result<E> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::config(format!("smoothing ε {epsilon} outside [0, 1)")));
    }
    if epsilon == 0.0 {
        return nll_loss(dists, targets);
    }
    if dists.len() != targets.len() {
        return Err(Error::shape(
            "label_smoothing_loss",
            format!("{} steps vs {} targets", dists.len(), targets.len()),
        ));
    }
    let mut acc = E::zero();
    for (row, &t) in dists.steps.iter().zip(targets) {
        let v = row.len();
        let uniform = E::from_f64(epsilon / v as f64);
        let boost = E::from_f64(1.0 - epsilon);
        for (w, &pw) in row.iter().enumerate() {
            let mut q = uniform;
            if w == t as usize {
                q += boost;
            }
            acc -= q * pw.ln_clamped();
        }
    }
    Ok(acc)
}

/// Unidirectional distillation: Σ_j KL(teacher_j ‖ student_j). The teacher
/// side carries no gradient by construction (it is plain data here).
pub fn kd_kl_loss<E: Element>(
    teacher: &StepDistributions<E>,
    student: &StepDistributions<E>,
) -> Result<E> {
    check_same_shape("kd_kl_loss", teacher, student)?;
    let mut acc = E::zero();
    for (t, s) in teacher.steps.iter().zip(&student.steps) {
        acc += kl_row(t, s);
    }
    Ok(acc)
}

/// Gated aggregate: per step, (1/H)·Σ over selected peers.
pub fn aggregate_peers<E: Element>(
    peers: &[StepDistributions<E>],
    mask: &GateMask,
) -> Result<StepDistributions<E>> {
    if peers.len() != mask.bits().len() {
        return Err(Error::shape(
            "aggregate_peers",
            format!("{} peers vs {} mask bits", peers.len(), mask.bits().len()),
        ));
    }
    let h = mask.h();
    if h == 0 {
        return Err(Error::config("aggregate over an all-zero gate mask"));
    }
    let selected: Vec<&StepDistributions<E>> = peers
        .iter()
        .zip(mask.bits())
        .filter_map(|(p, &on)| on.then_some(p))
        .collect();
    for other in &selected[1..] {
        check_same_shape("aggregate_peers", selected[0], other)?;
    }
    let inv_h = E::from_f64(1.0 / h as f64);
    let steps = (0..selected[0].len())
        .map(|j| {
            let v = selected[0].steps[j].len();
            let mut row = vec![E::zero(); v];
            for peer in &selected {
                for (acc, &x) in row.iter_mut().zip(&peer.steps[j]) {
                    *acc += x;
                }
            }
            for x in &mut row {
                *x *= inv_h;
            }
            row
        })
        .collect();
    Ok(StepDistributions { steps })
}

/// Fused knowledge for one step: ½·student + ½·aggregate.
pub fn fuse<E: Element>(student: &[E], aggregate: &[E]) -> Vec<E> {
    let half = E::from_f64(0.5);
    student
        .iter()
        .zip(aggregate)
        .map(|(&p, &q)| half * p + half * q)
        .collect()
}

/// [`fuse`] applied per step.
pub fn fuse_steps<E: Element>(
    student: &StepDistributions<E>,
    aggregate: &StepDistributions<E>,
) -> Result<StepDistributions<E>> {
    check_same_shape("fuse", student, aggregate)?;
    Ok(StepDistributions {
        steps: student
            .steps
            .iter()
            .zip(&aggregate.steps)
            .map(|(p, q)| fuse(p, q))
            .collect(),
    })
}

/// Imitation divergence with the fused distribution in the first slot:
/// Σ_j Σ_w fused(w)·ln(fused(w)/target(w)), clamped.
pub fn fused_kl<E: Element>(
    fused: &StepDistributions<E>,
    target: &StepDistributions<E>,
) -> Result<E> {
    check_same_shape("fused_kl", fused, target)?;
    let mut acc = E::zero();
    for (m, x) in fused.steps.iter().zip(&target.steps) {
        acc += kl_row(m, x);
    }
    Ok(acc)
}

/// Bidirectional loss: per step M = fuse(P, Q), then
/// ½·KL(M‖P) + ½·KL(M‖Q), summed over steps. Note the fused distribution
/// sits in the first KL slot on both sides.
pub fn js_loss<E: Element>(
    student: &StepDistributions<E>,
    aggregate: &StepDistributions<E>,
) -> Result<E> {
    let fused = fuse_steps(student, aggregate)?;
    let half = E::from_f64(0.5);
    Ok(half * fused_kl(&fused, student)? + half * fused_kl(&fused, aggregate)?)
}

// ── regularizers ────────────────────────────────────────────────────────

/// L2 penalty value: λ·Σ‖θ‖².
pub fn weight_decay_penalty<E: Element>(params: &ModelParams<E>, lambda: f64) -> f64 {
    if lambda == 0.0 {
        return 0.0;
    }
    lambda * params.squared_norm()
}

/// Add the L2 penalty's gradient 2λθ directly onto an accumulated gradient
/// set (cheaper than routing every parameter through the tape).
pub fn weight_decay_gradient<E: Element>(
    params: &ModelParams<E>,
    lambda: f64,
    grads: &mut GradientSet<E>,
) {
    if lambda == 0.0 {
        return;
    }
    let two_lambda = E::from_f64(2.0 * lambda);
    for (i, (_, theta)) in params.iter().enumerate() {
        let g = grads.tensor_at_mut(i);
        for (gx, &tx) in g.data_mut().iter_mut().zip(theta.data()) {
            *gx += two_lambda * tx;
        }
    }
}

// ── tape builders ───────────────────────────────────────────────────────

/// Temperature-softened probabilities from a logits node: softmax(logits/T).
pub fn tape_scaled_probs<E: Element>(tape: &mut Tape<E>, logits: TensorId, t: f64) -> TensorId {
    let scaled = tape.scale(logits, E::from_f64(1.0 / t));
    tape.softmax_rows(scaled)
}

/// NLL (optionally label-smoothed) of `targets` under `logits` `[J, V]`,
/// as a scalar tape node: −Σ_j Σ_w q_j(w)·log_softmax(logits)_j(w).
pub fn tape_nll<E: Element>(
    tape: &mut Tape<E>,
    logits: TensorId,
    targets: &[TokenId],
    smoothing: f64,
) -> Result<TensorId> {
    let shape = tape.value(logits).shape().to_vec();
    if shape.len() != 2 || shape[0] != targets.len() {
        return Err(Error::shape(
            "tape_nll",
            format!("logits {shape:?} vs {} targets", targets.len()),
        ));
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::config(format!("smoothing ε {smoothing} outside [0, 1)")));
    }
    let v = shape[1];
    let mut neg_q = TensorValue::zeros(shape);
    if smoothing > 0.0 {
        neg_q.data_mut().fill(E::from_f64(-smoothing / v as f64));
    }
    for (j, &t) in targets.iter().enumerate() {
        let t = t as usize;
        if t >= v {
            return Err(Error::config(format!("target {t} outside vocabulary of {v}")));
        }
        neg_q.data_mut()[j * v + t] += E::from_f64(-(1.0 - smoothing));
    }
    let logp = tape.log_softmax_rows(logits);
    let sel = tape.constant(neg_q);
    let picked = tape.mul(logp, sel)?;
    Ok(tape.sum(picked))
}

/// Unidirectional distillation against a detached target:
/// Σ_j KL(target_j ‖ softmax(logits/T)_j). Gradients reach only the logits.
pub fn tape_kd_kl<E: Element>(
    tape: &mut Tape<E>,
    student_logits: TensorId,
    target: &StepDistributions<E>,
    t: f64,
) -> Result<TensorId> {
    let shape = tape.value(student_logits).shape().to_vec();
    if shape.len() != 2 || shape[0] != target.len() {
        return Err(Error::shape(
            "tape_kd_kl",
            format!("logits {shape:?} vs {} target steps", target.len()),
        ));
    }
    let v = shape[1];
    // Host-side constants: the target rows and their clamped logs.
    let mut tv = TensorValue::zeros(shape.clone());
    let mut lntv = TensorValue::zeros(shape);
    for (j, row) in target.steps.iter().enumerate() {
        if row.len() != v {
            return Err(Error::shape(
                "tape_kd_kl",
                format!("target step {j} has |V| {}, logits {v}", row.len()),
            ));
        }
        for (w, &x) in row.iter().enumerate() {
            tv.data_mut()[j * v + w] = x;
            lntv.data_mut()[j * v + w] = x.ln_clamped();
        }
    }
    let scaled = tape.scale(student_logits, E::from_f64(1.0 / t));
    let logp = tape.log_softmax_rows(scaled);
    let t_const = tape.constant(tv);
    let lnt_const = tape.constant(lntv);
    let diff = tape.sub(lnt_const, logp)?;
    let terms = tape.mul(t_const, diff)?;
    Ok(tape.sum(terms))
}

/// Equal-weight mean of peer probability nodes: (1/K)·Σ_i p_i.
pub fn tape_aggregate<E: Element>(tape: &mut Tape<E>, peers: &[TensorId]) -> Result<TensorId> {
    if peers.is_empty() {
        return Err(Error::config("aggregate over an empty peer list"));
    }
    let mut acc = peers[0];
    for &p in &peers[1..] {
        acc = tape.add(acc, p)?;
    }
    Ok(tape.scale(acc, E::from_f64(1.0 / peers.len() as f64)))
}

/// Fused distribution node: ½·p + ½·q.
pub fn tape_fuse<E: Element>(tape: &mut Tape<E>, p: TensorId, q: TensorId) -> Result<TensorId> {
    let half = E::from_f64(0.5);
    let hp = tape.scale(p, half);
    let hq = tape.scale(q, half);
    tape.add(hp, hq)
}

/// The bidirectional divergence over probability nodes `p` and `q`
/// (both `[J, V]`): M = ½p+½q; ½·KL(M‖p) + ½·KL(M‖q), summed over steps.
/// Gradients flow into both `p` and `q`; pass a constant node to cut one
/// side off.
pub fn tape_js<E: Element>(tape: &mut Tape<E>, p: TensorId, q: TensorId) -> Result<TensorId> {
    let m = tape_fuse(tape, p, q)?;
    let lnm = tape.ln_clamped(m);
    let half = E::from_f64(0.5);
    let kl_against = |tape: &mut Tape<E>, x: TensorId| -> Result<TensorId> {
        let lnx = tape.ln_clamped(x);
        let diff = tape.sub(lnm, lnx)?;
        let terms = tape.mul(m, diff)?;
        Ok(tape.sum(terms))
    };
    let kl_mp = kl_against(tape, p)?;
    let kl_mq = kl_against(tape, q)?;
    let a = tape.scale(kl_mp, half);
    let b = tape.scale(kl_mq, half);
    tape.add(a, b)
}

// ── loss bookkeeping ────────────────────────────────────────────────────

/// Scalar summary of one objective evaluation. `total` is read off the tape
/// node that the optimizer differentiates, so `total = nll + T²·distill`
/// holds by construction.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct LossBreakdown {
    pub nll: f64,
    pub distill: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.nll.is_finite() && self.distill.is_finite() && self.total.is_finite()
    }
}
