//! Automatic metrics (distinctness, entropy, distributional distance), test
//! loss, prediction-entropy/diversity analyses, and the two robustness
//! harnesses (label-noise retraining and parameter perturbation).
//!
//! Every metric is a deterministic function of its inputs: map iteration
//! never drives an accumulation order, and sweep trials reduce in index
//! order, so reruns are byte-identical.

use crate::corpus::{Corpus, DialoguePair, TokenId, EOS_ID};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::losses::nll_loss;
use crate::model::{step_distributions, ModelParams, StepDistributions};
use crate::seeds::SeedTree;
use rayon::prelude::*;
use std::collections::{HashMap, HashSet};

/// Additive smoothing used by the entropy/distance estimators.
pub const SMOOTHING_EPS: f64 = 1e-10;

// ── n-gram machinery ────────────────────────────────────────────────────

type Ngram = Vec<TokenId>;

fn ngram_counts(seqs: &[Vec<TokenId>], n: usize) -> (HashMap<Ngram, usize>, usize) {
    let mut counts = HashMap::new();
    let mut total = 0;
    for seq in seqs {
        for gram in seq.windows(n) {
            *counts.entry(gram.to_vec()).or_insert(0) += 1;
            total += 1;
        }
    }
    (counts, total)
}

/// Smoothed probability of `gram` under `counts`: (c + ε) / (total + ε·|support|).
fn smoothed_prob(
    counts: &HashMap<Ngram, usize>,
    total: usize,
    support: usize,
    gram: &[TokenId],
) -> f64 {
    let c = counts.get(gram).copied().unwrap_or(0) as f64;
    (c + SMOOTHING_EPS) / (total as f64 + SMOOTHING_EPS * support as f64)
}

/// Size of the union support of two count tables.
fn union_support(a: &HashMap<Ngram, usize>, b: &HashMap<Ngram, usize>) -> usize {
    let mut support = a.len();
    for gram in b.keys() {
        if !a.contains_key(gram) {
            support += 1;
        }
    }
    support
}

// ── corpus-level metrics ────────────────────────────────────────────────

/// Percentage of distinct n-grams among all n-grams pooled over responses.
/// Zero n-grams (all responses shorter than n) is defined as 0.
pub fn dist_n(responses: &[Vec<TokenId>], n: usize) -> f64 {
    let mut seen = HashSet::new();
    let mut total = 0usize;
    for seq in responses {
        for gram in seq.windows(n) {
            seen.insert(gram.to_vec());
            total += 1;
        }
    }
    if total == 0 {
        return 0.0;
    }
    100.0 * seen.len() as f64 / total as f64
}

/// Mean surprisal (base 2) of the generated n-gram multiset under the
/// training-set n-gram frequency estimate.
pub fn ent_n(responses: &[Vec<TokenId>], train_responses: &[Vec<TokenId>], n: usize) -> f64 {
    let (train_counts, train_total) = ngram_counts(train_responses, n);
    let (gen_counts, _) = ngram_counts(responses, n);
    let support = union_support(&train_counts, &gen_counts);
    let mut sum = 0.0;
    let mut count = 0usize;
    for seq in responses {
        for gram in seq.windows(n) {
            sum -= smoothed_prob(&train_counts, train_total, support, gram).log2();
            count += 1;
        }
    }
    if count == 0 {
        return 0.0;
    }
    sum / count as f64
}

/// Mean log-ratio (base 2) of reference vs. generated n-gram frequencies
/// over the SET of reference n-grams. A signed quantity by definition; no
/// absolute value is taken.
pub fn dis_n(responses: &[Vec<TokenId>], references: &[Vec<TokenId>], n: usize) -> f64 {
    let (ref_counts, ref_total) = ngram_counts(references, n);
    let (gen_counts, gen_total) = ngram_counts(responses, n);
    let support = union_support(&ref_counts, &gen_counts);
    // Iterate references in encounter order (never the map) for determinism.
    let mut seen = HashSet::new();
    let mut sum = 0.0;
    for seq in references {
        for gram in seq.windows(n) {
            if !seen.insert(gram.to_vec()) {
                continue;
            }
            let pr = smoothed_prob(&ref_counts, ref_total, support, gram);
            let p = smoothed_prob(&gen_counts, gen_total, support, gram);
            sum += (pr / p).log2();
        }
    }
    if seen.is_empty() {
        return 0.0;
    }
    sum / seen.len() as f64
}

// ── model-level evaluation ──────────────────────────────────────────────

/// Teacher-forcing targets for a pair: the response then end-of-sequence.
pub fn pair_targets(pair: &DialoguePair) -> Vec<TokenId> {
    let mut t = pair.response.clone();
    t.push(EOS_ID);
    t
}

/// Mean per-pair NLL (summed over steps, natural log) with dropout off.
/// This is the canonical test/validation loss shared with the trainers.
pub fn test_nll<E: Element>(params: &ModelParams<E>, corpus: &Corpus) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::config("test_nll over an empty corpus"));
    }
    let per_pair: Vec<f64> = corpus
        .pairs
        .par_iter()
        .map(|pair| {
            let dists = step_distributions(params, pair, 1.0)?;
            Ok(nll_loss(&dists, &pair_targets(pair))?.as_f64())
        })
        .collect::<Result<_>>()?;
    // Fixed reduction order regardless of worker count.
    Ok(per_pair.iter().sum::<f64>() / per_pair.len() as f64)
}

/// Greedy responses for every history in the corpus, in corpus order.
pub fn decode_corpus<E: Element>(params: &ModelParams<E>, corpus: &Corpus) -> Result<Vec<Vec<TokenId>>> {
    corpus
        .pairs
        .par_iter()
        .map(|pair| crate::model::greedy_decode(params, &pair.history))
        .collect()
}

// ── prediction entropy / diversity ──────────────────────────────────────

/// Shannon entropy (natural log) of one distribution row; exact 0 for
/// one-hot rows.
pub fn entropy_of<E: Element>(row: &[E]) -> f64 {
    let mut h = 0.0;
    for &p in row {
        let p = p.as_f64();
        if p > 0.0 {
            h -= p * p.ln();
        }
    }
    h
}

/// Mean entropy of the equal-weight mixture of aligned step distributions,
/// pooled over steps. Input: one [`StepDistributions`] per model, all for
/// the same pair.
pub fn aggregate_entropy<E: Element>(per_model: &[StepDistributions<E>]) -> Result<f64> {
    if per_model.is_empty() {
        return Err(Error::config("entropy of an empty model list"));
    }
    let steps = per_model[0].len();
    let inv = 1.0 / per_model.len() as f64;
    let mut sum = 0.0;
    for j in 0..steps {
        let v = per_model[0].steps[j].len();
        let mut mixed = vec![0.0f64; v];
        for m in per_model {
            if m.len() != steps || m.steps[j].len() != v {
                return Err(Error::shape("aggregate_entropy", "misaligned step distributions"));
            }
            for (acc, &x) in mixed.iter_mut().zip(&m.steps[j]) {
                *acc += x.as_f64() * inv;
            }
        }
        sum += entropy_of(&mixed);
    }
    Ok(sum / steps as f64)
}

/// Mean pairwise Euclidean distance between aligned step distributions.
pub fn pairwise_diversity<E: Element>(per_model: &[StepDistributions<E>]) -> Result<f64> {
    if per_model.len() < 2 {
        return Err(Error::config("diversity needs at least 2 models"));
    }
    let steps = per_model[0].len();
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..per_model.len() {
        for j in (i + 1)..per_model.len() {
            for s in 0..steps {
                let a = &per_model[i].steps[s];
                let b = &per_model[j].steps[s];
                if a.len() != b.len() || per_model[j].len() != steps {
                    return Err(Error::shape("pairwise_diversity", "misaligned step distributions"));
                }
                let d2: f64 = a
                    .iter()
                    .zip(b)
                    .map(|(&x, &y)| {
                        let d = x.as_f64() - y.as_f64();
                        d * d
                    })
                    .sum();
                sum += d2.sqrt();
                count += 1;
            }
        }
    }
    Ok(sum / count as f64)
}

/// Mean entropy of the teacher-side aggregate over a probe corpus. Pass the
/// models whose predictions are mixed (for the sharded group: the first
/// three students; for a single teacher: just it).
pub fn prediction_entropy<E: Element>(
    models: &[&ModelParams<E>],
    probe: &Corpus,
) -> Result<f64> {
    if models.is_empty() || probe.is_empty() {
        return Err(Error::config("prediction_entropy needs models and a probe set"));
    }
    let per_pair: Vec<f64> = probe
        .pairs
        .par_iter()
        .map(|pair| {
            let dists: Vec<StepDistributions<E>> = models
                .iter()
                .map(|m| step_distributions(m, pair, 1.0))
                .collect::<Result<_>>()?;
            aggregate_entropy(&dists)
        })
        .collect::<Result<_>>()?;
    Ok(per_pair.iter().sum::<f64>() / per_pair.len() as f64)
}

/// Mean pairwise distance between student predictions over a probe corpus.
pub fn prediction_diversity<E: Element>(
    models: &[&ModelParams<E>],
    probe: &Corpus,
) -> Result<f64> {
    if models.len() < 2 || probe.is_empty() {
        return Err(Error::config("prediction_diversity needs ≥ 2 models and a probe set"));
    }
    let per_pair: Vec<f64> = probe
        .pairs
        .par_iter()
        .map(|pair| {
            let dists: Vec<StepDistributions<E>> = models
                .iter()
                .map(|m| step_distributions(m, pair, 1.0))
                .collect::<Result<_>>()?;
            pairwise_diversity(&dists)
        })
        .collect::<Result<_>>()?;
    Ok(per_pair.iter().sum::<f64>() / per_pair.len() as f64)
}

// ── metric report ───────────────────────────────────────────────────────

/// One evaluation's metric table. Optional rows apply only to multi-student
/// strategies.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct MetricReport {
    pub test_nll: f64,
    pub dist_1: f64,
    pub dist_2: f64,
    pub ent_1: f64,
    pub ent_2: f64,
    pub dis_1: f64,
    pub dis_2: f64,
    pub prediction_entropy: Option<f64>,
    pub prediction_diversity: Option<f64>,
}

impl MetricReport {
    /// Full metric computation for one model against test data.
    pub fn compute<E: Element>(
        params: &ModelParams<E>,
        train: &Corpus,
        test: &Corpus,
    ) -> Result<MetricReport> {
        let generated = decode_corpus(params, test)?;
        let references: Vec<Vec<TokenId>> =
            test.pairs.iter().map(|p| p.response.clone()).collect();
        let train_responses: Vec<Vec<TokenId>> =
            train.pairs.iter().map(|p| p.response.clone()).collect();
        Ok(MetricReport {
            test_nll: test_nll(params, test)?,
            dist_1: dist_n(&generated, 1),
            dist_2: dist_n(&generated, 2),
            ent_1: ent_n(&generated, &train_responses, 1),
            ent_2: ent_n(&generated, &train_responses, 2),
            dis_1: dis_n(&generated, &references, 1),
            dis_2: dis_n(&generated, &references, 2),
            prediction_entropy: None,
            prediction_diversity: None,
        })
    }

    /// Deterministic CSV rendering (`metric,value`, six decimal places).
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("metric,value\n");
        let mut push = |name: &str, v: f64| {
            out.push_str(&format!("{name},{v:.6}\n"));
        };
        push("test_nll", self.test_nll);
        push("dist_1", self.dist_1);
        push("dist_2", self.dist_2);
        push("ent_1", self.ent_1);
        push("ent_2", self.ent_2);
        push("dis_1", self.dis_1);
        push("dis_2", self.dis_2);
        if let Some(v) = self.prediction_entropy {
            push("prediction_entropy", v);
        }
        if let Some(v) = self.prediction_diversity {
            push("prediction_diversity", v);
        }
        out
    }
}

// ── robustness harnesses ────────────────────────────────────────────────

/// Label-noise robustness: for each fraction, corrupt that share of training
/// responses, hand the corrupted corpus to `run` (retrain from scratch +
/// clean-test evaluation), and tabulate. Fraction 0 passes the clean corpus
/// through untouched, so it reproduces the clean run bitwise.
pub fn noise_sweep(
    train: &Corpus,
    fractions: &[f64],
    seeds: &SeedTree,
    mut run: impl FnMut(&Corpus) -> Result<f64>,
) -> Result<Vec<(f64, f64)>> {
    let mut rows = Vec::with_capacity(fractions.len());
    for &fraction in fractions {
        let mut rng = seeds.stream(&format!("noise:{fraction}"));
        let noisy = crate::corpus::inject_noise(train, fraction, &mut rng)?;
        rows.push((fraction, run(&noisy)?));
    }
    Ok(rows)
}

/// Parameter-noise robustness settings.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PerturbSpec {
    pub sigmas: Vec<f64>,
    pub trials: usize,
}

impl PerturbSpec {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::config("perturbation needs at least one trial"));
        }
        if self.sigmas.is_empty() {
            return Err(Error::config("perturbation needs at least one σ"));
        }
        if let Some(s) = self.sigmas.iter().find(|&&s| !(s >= 0.0) || !s.is_finite()) {
            return Err(Error::config(format!("σ {s} must be finite and ≥ 0")));
        }
        Ok(())
    }
}

/// One σ row of a perturbation sweep.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct PerturbRow {
    pub sigma: f64,
    pub mean_loss: f64,
    pub std_loss: f64,
    pub trial_losses: Vec<f64>,
}

/// Gaussian parameter-noise robustness: θ' = θ + N(0, σ²) per entry, fresh
/// noise per trial; reports clean-test loss per trial. σ = 0 adds nothing,
/// so its rows equal the unperturbed loss exactly. The input parameters are
/// never modified.
pub fn perturb_sweep<E: Element>(
    params: &ModelParams<E>,
    test: &Corpus,
    spec: &PerturbSpec,
    seeds: &SeedTree,
) -> Result<Vec<PerturbRow>> {
    spec.validate()?;
    let mut rows = Vec::with_capacity(spec.sigmas.len());
    for &sigma in &spec.sigmas {
        let trial_losses: Vec<f64> = (0..spec.trials)
            .into_par_iter()
            .map(|trial| {
                let mut rng = seeds.stream(&format!("perturb:{sigma}:{trial}"));
                let theta = params.perturbed(sigma, &mut rng);
                test_nll(&theta, test)
            })
            .collect::<Result<_>>()?;
        let mean = trial_losses.iter().sum::<f64>() / trial_losses.len() as f64;
        let var = if trial_losses.len() > 1 {
            trial_losses.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>()
                / (trial_losses.len() - 1) as f64
        } else {
            0.0
        };
        rows.push(PerturbRow {
            sigma,
            mean_loss: mean,
            std_loss: var.sqrt(),
            trial_losses,
        });
    }
    Ok(rows)
}
