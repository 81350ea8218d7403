//! Tape-based forward passes: encoding, attention, teacher-forced training
//! passes, and greedy decoding.

use super::{ModelParams, StepDistributions};
use crate::corpus::{DialoguePair, TokenId, BOS_ID, EOS_ID};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::model::GradientSet;
use crate::tape::{Gradients, Tape, TensorId};
use crate::tensor::TensorValue;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Whether dropout masks are sampled (training) or skipped (evaluation).
pub enum Mode<'a> {
    Train(&'a mut ChaCha8Rng),
    Eval,
}

/// One model's parameters registered as leaves on a tape.
pub struct BoundModel<'p, E: Element> {
    params: &'p ModelParams<E>,
    ids: Vec<TensorId>,
}

/// Encoder outputs for one history.
struct Encoded {
    /// Top-layer states, one row per source position: `[L, 2H]`.
    states: TensorId,
    /// Per encoder layer, `concat(fwd final, bwd final)`: `[1, 2H]`.
    finals: Vec<TensorId>,
}

/// Everything a loss needs from one teacher-forced pass.
pub struct ForwardPass {
    /// Stacked per-step logits, one row per target position: `[J, V]`.
    pub logits: TensorId,
    /// Target token per step: the response tokens followed by end-of-sequence.
    pub targets: Vec<TokenId>,
    /// Attention weights per step, each `[1, L]`.
    pub attention: Vec<TensorId>,
}

impl<'p, E: Element> BoundModel<'p, E> {
    /// Register every parameter tensor as a differentiable leaf.
    pub fn bind(tape: &mut Tape<E>, params: &'p ModelParams<E>) -> Self {
        let ids = params
            .iter()
            .map(|(_, t)| tape.leaf(t.clone()))
            .collect();
        BoundModel { params, ids }
    }

    pub fn params(&self) -> &ModelParams<E> {
        self.params
    }

    fn id(&self, name: &str) -> TensorId {
        self.ids[self.params.index[name]]
    }

    /// Collect parameter gradients in manifest order (zeros where unreached).
    pub fn gradients(&self, grads: &Gradients<E>) -> GradientSet<E> {
        let tensors = self
            .ids
            .iter()
            .zip(self.params.tensors.iter())
            .map(|(&id, t)| grads.get_or_zeros(id, t.shape()))
            .collect();
        GradientSet::from_tensors(tensors)
    }

    /// Inverted dropout on a tape value; identity in eval mode or at rate 0.
    fn dropout(&self, tape: &mut Tape<E>, x: TensorId, mode: &mut Mode) -> Result<TensorId> {
        let rate = self.params.config.dropout;
        let rng = match mode {
            Mode::Train(rng) if rate > 0.0 => rng,
            _ => return Ok(x),
        };
        let keep = 1.0 - rate;
        let mask: Vec<E> = (0..tape.value(x).len())
            .map(|_| {
                if rng.random_range(0.0..1.0) < keep {
                    E::one()
                } else {
                    E::zero()
                }
            })
            .collect();
        tape.dropout_apply(x, mask, E::from_f64(keep))
    }

    /// One GRU cell update: gates from the current input and previous state.
    ///
    /// r = σ(xWr + hUr + br), z = σ(xWz + hUz + bz),
    /// n = tanh(xWn + (r⊙h)Un + bn), h' = n + z⊙(h − n).
    fn gru_cell(
        &self,
        tape: &mut Tape<E>,
        prefix: &str,
        x: TensorId,
        h: TensorId,
    ) -> Result<TensorId> {
        let gate = |tape: &mut Tape<E>, g: &str, pre: TensorId| -> Result<TensorId> {
            let xw = tape.matmul(x, self.id(&format!("{prefix}.w_{g}")))?;
            let hu = tape.matmul(pre, self.id(&format!("{prefix}.u_{g}")))?;
            let s = tape.add(xw, hu)?;
            tape.add(s, self.id(&format!("{prefix}.b_{g}")))
        };
        let r_pre = gate(tape, "r", h)?;
        let r = tape.sigmoid(r_pre);
        let z_pre = gate(tape, "z", h)?;
        let z = tape.sigmoid(z_pre);
        let rh = tape.mul(r, h)?;
        let n_pre = gate(tape, "n", rh)?;
        let n = tape.tanh(n_pre);
        let h_minus_n = tape.sub(h, n)?;
        let z_gap = tape.mul(z, h_minus_n)?;
        tape.add(n, z_gap)
    }

    /// Run the bidirectional encoder over a history.
    fn encode(
        &self,
        tape: &mut Tape<E>,
        history: &[TokenId],
        mode: &mut Mode,
    ) -> Result<Encoded> {
        if history.is_empty() {
            return Err(Error::config("cannot encode an empty history"));
        }
        let h = self.params.config.hidden_dim;
        let idx: Vec<usize> = history.iter().map(|&t| t as usize).collect();
        let mut inputs: Vec<TensorId> = idx
            .iter()
            .map(|&i| tape.gather_rows(self.id("embedding"), &[i]))
            .collect::<Result<_>>()?;
        let len = inputs.len();
        let mut finals = Vec::with_capacity(self.params.config.enc_layers);
        for l in 0..self.params.config.enc_layers {
            for x in &mut inputs {
                *x = self.dropout(tape, *x, mode)?;
            }
            let h0 = tape.constant(TensorValue::zeros(vec![1, h]));
            let mut fwd = Vec::with_capacity(len);
            let mut state = h0;
            for &x in &inputs {
                state = self.gru_cell(tape, &format!("enc.l{l}.fwd"), x, state)?;
                fwd.push(state);
            }
            let mut bwd = vec![h0; len];
            let mut state = h0;
            for pos in (0..len).rev() {
                state = self.gru_cell(tape, &format!("enc.l{l}.bwd"), inputs[pos], state)?;
                bwd[pos] = state;
            }
            inputs = (0..len)
                .map(|pos| tape.concat(&[fwd[pos], bwd[pos]], 1))
                .collect::<Result<_>>()?;
            finals.push(tape.concat(&[fwd[len - 1], bwd[0]], 1)?);
        }
        let states = tape.concat(&inputs, 0)?;
        Ok(Encoded { states, finals })
    }

    /// Decoder start states: a tanh projection of the matching encoder
    /// layer's final states (the last encoder layer when depths differ).
    fn init_decoder_states(&self, tape: &mut Tape<E>, enc: &Encoded) -> Result<Vec<TensorId>> {
        let enc_top = self.params.config.enc_layers - 1;
        (0..self.params.config.dec_layers)
            .map(|l| {
                let src = enc.finals[l.min(enc_top)];
                let proj = tape.matmul(src, self.id(&format!("init.l{l}.w")))?;
                let shifted = tape.add(proj, self.id(&format!("init.l{l}.b")))?;
                Ok(tape.tanh(shifted))
            })
            .collect()
    }

    /// Additive attention scored against the previous top-layer decoder
    /// state. Returns `(context [1, 2H], weights [1, L])`.
    fn attend(
        &self,
        tape: &mut Tape<E>,
        enc_states: TensorId,
        enc_proj: TensorId,
        dec_top: TensorId,
    ) -> Result<(TensorId, TensorId)> {
        let dec_proj = tape.matmul(dec_top, self.id("attn.w_dec"))?;
        let mixed = tape.add(enc_proj, dec_proj)?; // broadcast over L rows
        let act = tape.tanh(mixed);
        let scores = tape.matmul_transpose_b(self.id("attn.v"), act)?;
        let weights = tape.softmax_rows(scores);
        let context = tape.matmul(weights, enc_states)?;
        Ok((context, weights))
    }

    /// One decoder step from `y_prev`; updates `states` in place and returns
    /// `(logits [1, V], attention weights [1, L])`.
    fn decode_step(
        &self,
        tape: &mut Tape<E>,
        enc: &Encoded,
        enc_proj: TensorId,
        states: &mut [TensorId],
        y_prev: TokenId,
        mode: &mut Mode,
    ) -> Result<(TensorId, TensorId)> {
        let emb = tape.gather_rows(self.id("embedding"), &[y_prev as usize])?;
        let top = states[states.len() - 1];
        let (context, weights) = self.attend(tape, enc.states, enc_proj, top)?;
        let mut x = tape.concat(&[emb, context], 1)?;
        for (l, state) in states.iter_mut().enumerate() {
            x = self.dropout(tape, x, mode)?;
            *state = self.gru_cell(tape, &format!("dec.l{l}"), x, *state)?;
            x = *state;
        }
        let x = self.dropout(tape, x, mode)?;
        let proj = tape.matmul(x, self.id("out.w"))?;
        let logits = tape.add(proj, self.id("out.b"))?;
        Ok((logits, weights))
    }

    /// Teacher-forced pass over one pair. Step `j` consumes target `j − 1`
    /// (beginning-of-sequence at step 0) and predicts target `j`, where the
    /// targets are the response tokens followed by end-of-sequence.
    pub fn forward_teacher_forced(
        &self,
        tape: &mut Tape<E>,
        pair: &DialoguePair,
        mode: &mut Mode,
    ) -> Result<ForwardPass> {
        if pair.response.is_empty() {
            return Err(Error::config("cannot train on an empty response"));
        }
        let enc = self.encode(tape, &pair.history, mode)?;
        let enc_proj = tape.matmul(enc.states, self.id("attn.w_enc"))?;
        let mut states = self.init_decoder_states(tape, &enc)?;
        let mut targets = pair.response.clone();
        targets.push(EOS_ID);
        let mut step_logits = Vec::with_capacity(targets.len());
        let mut attention = Vec::with_capacity(targets.len());
        let mut y_prev = BOS_ID;
        for &target in &targets {
            let (logits, weights) =
                self.decode_step(tape, &enc, enc_proj, &mut states, y_prev, mode)?;
            step_logits.push(logits);
            attention.push(weights);
            y_prev = target;
        }
        let logits = tape.concat(&step_logits, 0)?;
        Ok(ForwardPass {
            logits,
            targets,
            attention,
        })
    }
}

// ── Whole-model conveniences (own their tape; evaluation mode) ──

/// Per-step next-token distributions at a softmax temperature.
pub fn step_distributions<E: Element>(
    params: &ModelParams<E>,
    pair: &DialoguePair,
    temperature: f64,
) -> Result<StepDistributions<E>> {
    if temperature <= 0.0 {
        return Err(Error::config(format!(
            "temperature {temperature} must be positive"
        )));
    }
    let mut tape = Tape::new();
    let model = BoundModel::bind(&mut tape, params);
    let pass = model.forward_teacher_forced(&mut tape, pair, &mut Mode::Eval)?;
    let scaled = tape.scale(pass.logits, E::from_f64(1.0 / temperature));
    let probs = tape.softmax_rows(scaled);
    let value = tape.value(probs);
    let v = params.config.vocab_size;
    let steps = (0..pass.targets.len())
        .map(|j| value.data()[j * v..(j + 1) * v].to_vec())
        .collect();
    Ok(StepDistributions { steps })
}

/// Attention weights per teacher-forced step, each row over source positions.
pub fn attention_weights<E: Element>(
    params: &ModelParams<E>,
    pair: &DialoguePair,
) -> Result<Vec<Vec<E>>> {
    let mut tape = Tape::new();
    let model = BoundModel::bind(&mut tape, params);
    let pass = model.forward_teacher_forced(&mut tape, pair, &mut Mode::Eval)?;
    Ok(pass
        .attention
        .iter()
        .map(|&w| tape.value(w).data().to_vec())
        .collect())
}

/// Greedy (argmax, lowest id on ties) decoding from a history. Stops at
/// end-of-sequence or `max_decode_len`; the terminator is not returned.
pub fn greedy_decode<E: Element>(
    params: &ModelParams<E>,
    history: &[TokenId],
) -> Result<Vec<TokenId>> {
    let mut tape = Tape::new();
    let model = BoundModel::bind(&mut tape, params);
    let mut mode = Mode::Eval;
    let enc = model.encode(&mut tape, history, &mut mode)?;
    let enc_proj = tape.matmul(enc.states, model.id("attn.w_enc"))?;
    let mut states = model.init_decoder_states(&mut tape, &enc)?;
    let mut out = Vec::new();
    let mut y_prev = BOS_ID;
    for _ in 0..params.config.max_decode_len {
        let (logits, _) =
            model.decode_step(&mut tape, &enc, enc_proj, &mut states, y_prev, &mut mode)?;
        let row = tape.value(logits);
        let mut best = 0usize;
        for (i, &x) in row.data().iter().enumerate() {
            if x > row.data()[best] {
                best = i;
            }
        }
        if best as TokenId == EOS_ID {
            break;
        }
        out.push(best as TokenId);
        y_prev = best as TokenId;
    }
    Ok(out)
}
