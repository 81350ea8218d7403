//! Criterion benchmarks for the hot paths: the teacher-forced forward pass,
//! gradient computation (single-model and group), one optimiser step per
//! training style, decoding and the corpus-level metrics.
//!
//! Sizes mirror the desk-scale regime the trainers run at (tiny dims, short
//! sequences), so the numbers here track what training actually spends.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use mrbd_core::corpus::{Corpus, DialoguePair, Split};
use mrbd_core::losses::GateMask;
use mrbd_core::model::{
    greedy_decode, step_distributions, BoundModel, Mode, ModelConfig, ModelParams,
};
use mrbd_core::seeds::SeedTree;
use mrbd_core::tape::Tape;
use mrbd_core::trainer::{
    mrbd_gradients, mrbd_step, supervised_step, AdamState, Strategy, TrainConfig,
};
use mrbd_core::eval;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ── fixtures ────────────────────────────────────────────────────────────

const VOCAB: usize = 64;

fn model_cfg() -> ModelConfig {
    ModelConfig {
        vocab_size: VOCAB,
        embed_dim: 12,
        hidden_dim: 12,
        enc_layers: 1,
        dec_layers: 1,
        dropout: 0.0,
        max_decode_len: 12,
    }
}

fn params(seed: u64) -> ModelParams<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ModelParams::init(&model_cfg(), &mut rng).unwrap()
}

fn pairs(m: usize, seed: u64) -> Vec<DialoguePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..m)
        .map(|_| {
            let hl = rng.random_range(4..9usize);
            let rl = rng.random_range(3..7usize);
            DialoguePair {
                history: (0..hl).map(|_| rng.random_range(4..VOCAB as u32)).collect(),
                response: (0..rl).map(|_| rng.random_range(4..VOCAB as u32)).collect(),
            }
        })
        .collect()
}

fn train_cfg(strategy: Strategy, students: usize) -> TrainConfig {
    TrainConfig {
        strategy,
        students,
        imitation_p: 0.5,
        temperature: 3.0,
        lr: 1e-3,
        batch_size: 8,
        epochs: 1,
        overlap: 0.25,
        dropout: 0.0,
        seed: 5,
        ..TrainConfig::default()
    }
}

// ── forward / backward ──────────────────────────────────────────────────

fn bench_forward(c: &mut Criterion) {
    let p = params(1);
    let batch = pairs(8, 2);
    let mut g = c.benchmark_group("forward");

    g.bench_function("teacher_forced_pair", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let model = BoundModel::bind(&mut tape, &p);
            model
                .forward_teacher_forced(&mut tape, &batch[0], &mut Mode::Eval)
                .unwrap()
        })
    });

    g.bench_function("step_distributions_pair", |b| {
        b.iter(|| step_distributions(&p, &batch[0], 3.0).unwrap())
    });

    g.bench_function("greedy_decode", |b| {
        b.iter(|| greedy_decode(&p, &batch[0].history).unwrap())
    });

    g.finish();
}

fn bench_gradients(c: &mut Criterion) {
    let batch = pairs(8, 3);
    let refs: Vec<&DialoguePair> = batch.iter().collect();
    let seeds = SeedTree::new(7);
    let mut g = c.benchmark_group("gradients");
    g.sample_size(30);

    // Single-model NLL gradients by way of one full supervised update; the
    // Adam apply is a vanishing share of the forward/backward cost.
    let cfg = train_cfg(Strategy::Plain, 1);
    g.bench_function("supervised_step_batch8", |b| {
        b.iter_batched(
            || (params(1), AdamState::new(&params(1)), ChaCha8Rng::seed_from_u64(9)),
            |(mut p, mut adam, mut rng)| {
                supervised_step(&mut p, &mut adam, &refs, &cfg, &mut rng, (0, 0, 0)).unwrap()
            },
            BatchSize::SmallInput,
        )
    });

    for n in [2usize, 3, 6] {
        let students: Vec<ModelParams<f32>> = (0..n).map(|s| params(s as u64)).collect();
        let cfg = train_cfg(Strategy::Mrbd, n);
        let batches: Vec<Option<Vec<&DialoguePair>>> =
            (0..n).map(|_| Some(refs.clone())).collect();
        let gates: Vec<Option<GateMask>> = (0..n).map(|_| Some(GateMask::all_on(n - 1))).collect();
        g.bench_function(format!("group_gradients_n{n}_batch8"), |b| {
            b.iter(|| {
                mrbd_gradients(&students, &batches, &gates, &cfg, &seeds, 0, 0).unwrap()
            })
        });
    }

    g.finish();
}

fn bench_group_step(c: &mut Criterion) {
    let batch = pairs(8, 4);
    let refs: Vec<&DialoguePair> = batch.iter().collect();
    let seeds = SeedTree::new(11);
    let n = 3;
    let cfg = train_cfg(Strategy::Mrbd, n);
    let mut g = c.benchmark_group("group_step");
    g.sample_size(30);

    g.bench_function("mrbd_step_n3_batch8", |b| {
        b.iter_batched(
            || {
                let students: Vec<ModelParams<f32>> = (0..n).map(|s| params(s as u64)).collect();
                let adam: Vec<AdamState<f32>> = students.iter().map(AdamState::new).collect();
                (students, adam, vec![0u64; n])
            },
            |(mut students, mut adam, mut versions)| {
                let batches: Vec<Option<Vec<&DialoguePair>>> =
                    (0..n).map(|_| Some(refs.clone())).collect();
                let gates: Vec<Option<GateMask>> =
                    (0..n).map(|_| Some(GateMask::all_on(n - 1))).collect();
                mrbd_step(
                    &mut students,
                    &mut adam,
                    &mut versions,
                    &batches,
                    &gates,
                    &cfg,
                    &seeds,
                    0,
                    0,
                )
                .unwrap()
            },
            BatchSize::SmallInput,
        )
    });

    g.finish();
}

// ── evaluation ──────────────────────────────────────────────────────────

fn bench_eval(c: &mut Criterion) {
    let p = params(1);
    let corpus = Corpus { pairs: pairs(64, 5), split: Split::Test };
    let responses: Vec<Vec<u32>> = corpus.pairs.iter().map(|q| q.response.clone()).collect();
    let mut g = c.benchmark_group("eval");

    g.bench_function("test_nll_64pairs", |b| {
        b.iter(|| eval::test_nll(&p, &corpus).unwrap())
    });

    g.bench_function("dist2_64responses", |b| {
        b.iter(|| eval::dist_n(&responses, 2))
    });

    g.bench_function("ent2_64responses", |b| {
        b.iter(|| eval::ent_n(&responses, &responses, 2))
    });

    g.bench_function("dis2_64responses", |b| {
        b.iter(|| eval::dis_n(&responses, &responses, 2))
    });

    g.finish();
}

criterion_group!(
    benches,
    bench_forward,
    bench_gradients,
    bench_group_step,
    bench_eval
);
criterion_main!(benches);
