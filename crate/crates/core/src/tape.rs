//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] is an append-only list of nodes; each node owns its forward
//! value and remembers which earlier nodes produced its inputs. Because nodes
//! are appended in execution order, every node appears *after* all of its
//! inputs, so a single reverse sweep visits each node after all of its
//! consumers — gradients are complete by the time a node is processed.
//!
//! Gradients accumulate additively (a value consumed twice receives the sum
//! of both contributions) and the gradient buffers are freshly
//! zero-initialised on every [`Tape::backward`] call. All loops are plain
//! sequential iterations, so a forward/backward pass over a given tape is
//! bitwise deterministic.

use crate::element::{e, Element};
use crate::error::{Error, Result};
use crate::tensor::TensorValue;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

impl TensorId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive operations the tape can record.
///
/// Aux data captured at record time (dropout masks, gather indices, scale
/// factors) is stored inline so backward needs nothing but the tape itself.
#[derive(Debug, Clone)]
enum Op<E: Element> {
    Leaf { requires_grad: bool },
    /// `a[m,k] · b[k,n]`
    Matmul { a: TensorId, b: TensorId },
    /// `a[m,k] · b[n,k]ᵀ`
    MatmulTransposeB { a: TensorId, b: TensorId },
    /// Elementwise sum; `broadcast` means `b` is one row broadcast over `a`'s rows.
    Add { a: TensorId, b: TensorId, broadcast: bool },
    /// Elementwise difference `a - b`.
    Sub { a: TensorId, b: TensorId },
    /// Elementwise (Hadamard) product.
    Mul { a: TensorId, b: TensorId },
    /// Stack along `axis` (0 = rows, 1 = columns) of 2-D views.
    Concat { inputs: Vec<TensorId>, axis: usize },
    /// Select whole rows of `table` by index (embedding lookup).
    GatherRows { table: TensorId, indices: Vec<usize> },
    Tanh { x: TensorId },
    Sigmoid { x: TensorId },
    /// Row-wise softmax with max subtraction.
    SoftmaxRows { x: TensorId },
    /// Row-wise log-softmax with max subtraction.
    LogSoftmaxRows { x: TensorId },
    /// Inverted dropout: `x ⊙ mask / keep_prob`, mask entries in {0, 1}.
    DropoutApply { x: TensorId, mask: Vec<E>, keep_prob: E },
    /// Multiply by a compile-time constant scalar.
    Scale { x: TensorId, c: E },
    /// Sum of all entries, producing a scalar.
    Sum { x: TensorId },
    /// `ln(clamp(x, 1e-8, 1))`; the clamp saturates the gradient outside the range.
    LnClamped { x: TensorId },
}

#[derive(Debug)]
struct Node<E: Element> {
    value: TensorValue<E>,
    op: Op<E>,
}

/// Record of one forward computation.
#[derive(Debug, Default)]
pub struct Tape<E: Element> {
    nodes: Vec<Node<E>>,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<E: Element> {
    grads: Vec<Option<TensorValue<E>>>,
}

impl<E: Element> Gradients<E> {
    /// Gradient of the loss w.r.t. the node, if the node was reached.
    pub fn get(&self, id: TensorId) -> Option<&TensorValue<E>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient or a zero tensor of the given shape for unreached nodes.
    pub fn get_or_zeros(&self, id: TensorId, shape: &[usize]) -> TensorValue<E> {
        match self.get(id) {
            Some(g) => g.clone(),
            None => TensorValue::zeros(shape.to_vec()),
        }
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of a node.
    pub fn value(&self, id: TensorId) -> &TensorValue<E> {
        &self.nodes[id.0].value
    }

    /// Insert a differentiable leaf (parameters, anything we want gradients for).
    pub fn leaf(&mut self, value: TensorValue<E>) -> TensorId {
        self.push(value, Op::Leaf { requires_grad: true })
    }

    /// Insert a constant leaf: inputs, one-hot targets, detached teacher
    /// distributions. No gradient buffer is kept for it.
    pub fn constant(&mut self, value: TensorValue<E>) -> TensorId {
        self.push(value, Op::Leaf { requires_grad: false })
    }

    fn push(&mut self, value: TensorValue<E>, op: Op<E>) -> TensorId {
        self.nodes.push(Node { value, op });
        TensorId(self.nodes.len() - 1)
    }

    fn dims2(&self, id: TensorId) -> (usize, usize) {
        let v = self.value(id);
        (v.rows(), v.cols())
    }

    // ── primitives: forward ─────────────────────────────────────────────

    /// `a[m,k] · b[k,n] → [m,n]`
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.dims2(a);
        let (k2, n) = self.dims2(b);
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} · {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n, false);
        self.ok_push(TensorValue::new(vec![m, n], out)?, Op::Matmul { a, b })
    }

    /// `a[m,k] · b[n,k]ᵀ → [m,n]`
    pub fn matmul_transpose_b(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.dims2(a);
        let (n, k2) = self.dims2(b);
        if k != k2 {
            return Err(Error::shape(
                "matmul_transpose_b",
                format!("{:?} · {:?}ᵀ", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n, true);
        self.ok_push(TensorValue::new(vec![m, n], out)?, Op::MatmulTransposeB { a, b })
    }

    /// Elementwise `a + b`; `b` may also be a single row broadcast over `a`'s rows.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ar, ac) = self.dims2(a);
        let (br, bc) = self.dims2(b);
        let broadcast = br == 1 && ar > 1;
        if ac != bc || (!broadcast && ar != br) {
            return Err(Error::shape(
                "add",
                format!("{:?} + {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let bv = self.value(b).data();
        let mut out = self.value(a).data().to_vec();
        if broadcast {
            for r in 0..ar {
                for c in 0..ac {
                    out[r * ac + c] += bv[c];
                }
            }
        } else {
            for (o, &x) in out.iter_mut().zip(bv) {
                *o += x;
            }
        }
        let shape = self.value(a).shape().to_vec();
        self.ok_push(TensorValue::new(shape, out)?, Op::Add { a, b, broadcast })
    }

    /// Elementwise `a - b` (same shape).
    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("sub", a, b)?;
        let out: Vec<E> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x - y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.ok_push(TensorValue::new(shape, out)?, Op::Sub { a, b })
    }

    /// Elementwise `a ⊙ b` (same shape).
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("mul", a, b)?;
        let out: Vec<E> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.ok_push(TensorValue::new(shape, out)?, Op::Mul { a, b })
    }

    /// Concatenate 2-D views along `axis` (0 = stack rows, 1 = widen rows).
    pub fn concat(&mut self, inputs: &[TensorId], axis: usize) -> Result<TensorId> {
        if inputs.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        if axis > 1 {
            return Err(Error::shape("concat", format!("axis {axis} out of range")));
        }
        let (r0, c0) = self.dims2(inputs[0]);
        let (mut rows, mut cols) = (r0, c0);
        for &id in &inputs[1..] {
            let (r, c) = self.dims2(id);
            if axis == 0 {
                if c != c0 {
                    return Err(Error::shape("concat", format!("row widths differ: {c0} vs {c}")));
                }
                rows += r;
            } else {
                if r != r0 {
                    return Err(Error::shape("concat", format!("row counts differ: {r0} vs {r}")));
                }
                cols += c;
            }
        }
        let mut out = Vec::with_capacity(rows * cols);
        if axis == 0 {
            for &id in inputs {
                out.extend_from_slice(self.value(id).data());
            }
        } else {
            for r in 0..rows {
                for &id in inputs {
                    let (_, c) = self.dims2(id);
                    let d = self.value(id).data();
                    out.extend_from_slice(&d[r * c..(r + 1) * c]);
                }
            }
        }
        self.ok_push(
            TensorValue::new(vec![rows, cols], out)?,
            Op::Concat { inputs: inputs.to_vec(), axis },
        )
    }

    /// Row lookup: `table[V,C]` gathered at `indices` → `[len,C]`.
    pub fn gather_rows(&mut self, table: TensorId, indices: &[usize]) -> Result<TensorId> {
        let (v, c) = self.dims2(table);
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(Error::shape(
                "gather_rows",
                format!("index {bad} out of range for {v} rows"),
            ));
        }
        let d = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            out.extend_from_slice(&d[i * c..(i + 1) * c]);
        }
        self.ok_push(
            TensorValue::new(vec![indices.len(), c], out)?,
            Op::GatherRows { table, indices: indices.to_vec() },
        )
    }

    pub fn tanh(&mut self, x: TensorId) -> TensorId {
        let out: Vec<E> = self.value(x).data().iter().map(|&v| v.tanh()).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(TensorValue::new(shape, out).unwrap(), Op::Tanh { x })
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let one = E::one();
        let out: Vec<E> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| one / (one + (-v).exp()))
            .collect();
        let shape = self.value(x).shape().to_vec();
        self.push(TensorValue::new(shape, out).unwrap(), Op::Sigmoid { x })
    }

    /// Row-wise softmax; the row max is subtracted first so `[1000, 0]` stays finite.
    pub fn softmax_rows(&mut self, x: TensorId) -> TensorId {
        let (rows, cols) = self.dims2(x);
        let d = self.value(x).data();
        let mut out = vec![E::zero(); rows * cols];
        for r in 0..rows {
            softmax_row(&d[r * cols..(r + 1) * cols], &mut out[r * cols..(r + 1) * cols]);
        }
        let shape = self.value(x).shape().to_vec();
        self.push(TensorValue::new(shape, out).unwrap(), Op::SoftmaxRows { x })
    }

    /// Row-wise log-softmax: `x - max - ln Σ exp(x - max)`.
    pub fn log_softmax_rows(&mut self, x: TensorId) -> TensorId {
        let (rows, cols) = self.dims2(x);
        let d = self.value(x).data();
        let mut out = vec![E::zero(); rows * cols];
        for r in 0..rows {
            let row = &d[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(E::neg_infinity(), E::max);
            let lse = row
                .iter()
                .map(|&v| (v - max).exp())
                .fold(E::zero(), |s, v| s + v)
                .ln();
            for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = v - max - lse;
            }
        }
        let shape = self.value(x).shape().to_vec();
        self.push(TensorValue::new(shape, out).unwrap(), Op::LogSoftmaxRows { x })
    }

    /// Inverted dropout. `mask` holds {0,1} entries; kept activations are
    /// scaled by `1/keep_prob` at train time so eval needs no rescaling.
    pub fn dropout_apply(&mut self, x: TensorId, mask: Vec<E>, keep_prob: E) -> Result<TensorId> {
        if mask.len() != self.value(x).len() {
            return Err(Error::shape(
                "dropout_mask_apply",
                format!("mask len {} vs tensor len {}", mask.len(), self.value(x).len()),
            ));
        }
        if keep_prob <= E::zero() || keep_prob > E::one() {
            return Err(Error::shape("dropout_mask_apply", "keep_prob outside (0, 1]"));
        }
        let inv = E::one() / keep_prob;
        let out: Vec<E> = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m * inv)
            .collect();
        let shape = self.value(x).shape().to_vec();
        self.ok_push(
            TensorValue::new(shape, out)?,
            Op::DropoutApply { x, mask, keep_prob },
        )
    }

    /// Multiply every entry by the constant `c`.
    pub fn scale(&mut self, x: TensorId, c: E) -> TensorId {
        let out: Vec<E> = self.value(x).data().iter().map(|&v| v * c).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(TensorValue::new(shape, out).unwrap(), Op::Scale { x, c })
    }

    /// Sum of all entries → scalar.
    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let s = self.value(x).data().iter().fold(E::zero(), |acc, &v| acc + v);
        self.push(TensorValue::scalar(s), Op::Sum { x })
    }

    /// `ln(clamp(x, 1e-8, 1))` — probabilities are clamped before every log.
    pub fn ln_clamped(&mut self, x: TensorId) -> TensorId {
        let out: Vec<E> = self.value(x).data().iter().map(|&v| v.ln_clamped()).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(TensorValue::new(shape, out).unwrap(), Op::LnClamped { x })
    }

    fn ok_push(&mut self, value: TensorValue<E>, op: Op<E>) -> Result<TensorId> {
        Ok(self.push(value, op))
    }

    fn same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss node. Returns per-node gradients;
    /// constants (and nodes the loss does not depend on) have none.
    pub fn backward(&self, loss: TensorId) -> Result<Gradients<E>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<TensorValue<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(TensorValue::scalar(E::one()));

        for idx in (0..=loss.0).rev() {
            // Skip nodes the loss does not depend on, and keep leaf gradients
            // (they are the result). Intermediate gradients are dropped once
            // propagated, which bounds peak memory.
            if grads[idx].is_none() {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf { .. }) {
                continue;
            }
            let g = grads[idx].take().expect("checked above");
            self.propagate(idx, &g, &mut grads);
        }

        // Gradient buffers for constants are never materialised; mask any that
        // slipped through (constants feeding elementwise ops).
        for (idx, slot) in grads.iter_mut().enumerate() {
            if let Op::Leaf { requires_grad: false } = self.nodes[idx].op {
                *slot = None;
            }
        }
        Ok(Gradients { grads })
    }

    /// Add `delta` into the gradient buffer of `target` (allocating lazily).
    fn accumulate(&self, grads: &mut [Option<TensorValue<E>>], target: TensorId, delta: &[E]) {
        let slot = &mut grads[target.0];
        match slot {
            Some(buf) => {
                for (o, &d) in buf.data_mut().iter_mut().zip(delta) {
                    *o += d;
                }
            }
            None => {
                let shape = self.value(target).shape().to_vec();
                debug_assert_eq!(shape.iter().product::<usize>(), delta.len());
                *slot = Some(TensorValue::new(shape, delta.to_vec()).expect("shape checked"));
            }
        }
    }

    fn propagate(&self, idx: usize, g: &TensorValue<E>, grads: &mut [Option<TensorValue<E>>]) {
        let gd = g.data();
        match &self.nodes[idx].op {
            Op::Leaf { .. } => {}
            Op::Matmul { a, b } => {
                let (m, k) = self.dims2(*a);
                let (_, n) = self.dims2(*b);
                // dA = g · Bᵀ ; dB = Aᵀ · g
                let da = matmul_raw(gd, self.value(*b).data(), m, n, k, true);
                self.accumulate(grads, *a, &da);
                let db = matmul_t_a(self.value(*a).data(), gd, m, k, n);
                self.accumulate(grads, *b, &db);
            }
            Op::MatmulTransposeB { a, b } => {
                let (m, k) = self.dims2(*a);
                let (n, _) = self.dims2(*b);
                // out = A·Bᵀ: dA = g · B ; dB = gᵀ · A
                let da = matmul_raw(gd, self.value(*b).data(), m, n, k, false);
                self.accumulate(grads, *a, &da);
                let db = matmul_t_a(gd, self.value(*a).data(), m, n, k);
                self.accumulate(grads, *b, &db);
            }
            Op::Add { a, b, broadcast } => {
                self.accumulate(grads, *a, gd);
                if *broadcast {
                    let (rows, cols) = self.dims2(*a);
                    let mut db = vec![E::zero(); cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            db[c] += gd[r * cols + c];
                        }
                    }
                    self.accumulate(grads, *b, &db);
                } else {
                    self.accumulate(grads, *b, gd);
                }
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, gd);
                let neg: Vec<E> = gd.iter().map(|&v| -v).collect();
                self.accumulate(grads, *b, &neg);
            }
            Op::Mul { a, b } => {
                let da: Vec<E> = gd.iter().zip(self.value(*b).data()).map(|(&g, &y)| g * y).collect();
                self.accumulate(grads, *a, &da);
                let db: Vec<E> = gd.iter().zip(self.value(*a).data()).map(|(&g, &x)| g * x).collect();
                self.accumulate(grads, *b, &db);
            }
            Op::Concat { inputs, axis } => {
                if *axis == 0 {
                    let mut off = 0;
                    for &id in inputs {
                        let n = self.value(id).len();
                        self.accumulate(grads, id, &gd[off..off + n]);
                        off += n;
                    }
                } else {
                    let (rows, _) = self.dims2(inputs[0]);
                    let total_cols: usize = inputs.iter().map(|&id| self.dims2(id).1).sum();
                    let mut col_off = 0;
                    for &id in inputs {
                        let (_, c) = self.dims2(id);
                        let mut part = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            let s = r * total_cols + col_off;
                            part.extend_from_slice(&gd[s..s + c]);
                        }
                        self.accumulate(grads, id, &part);
                        col_off += c;
                    }
                }
            }
            Op::GatherRows { table, indices } => {
                let (v, c) = self.dims2(*table);
                let mut dt = vec![E::zero(); v * c];
                // Scatter-add in index order: repeated indices accumulate.
                for (j, &i) in indices.iter().enumerate() {
                    for col in 0..c {
                        dt[i * c + col] += gd[j * c + col];
                    }
                }
                self.accumulate(grads, *table, &dt);
            }
            Op::Tanh { x } => {
                let y = self.nodes[idx].value.data();
                let dx: Vec<E> = gd
                    .iter()
                    .zip(y)
                    .map(|(&g, &t)| g * (E::one() - t * t))
                    .collect();
                self.accumulate(grads, *x, &dx);
            }
            Op::Sigmoid { x } => {
                let y = self.nodes[idx].value.data();
                let dx: Vec<E> = gd
                    .iter()
                    .zip(y)
                    .map(|(&g, &s)| g * s * (E::one() - s))
                    .collect();
                self.accumulate(grads, *x, &dx);
            }
            Op::SoftmaxRows { x } => {
                let y = self.nodes[idx].value.data();
                let (rows, cols) = self.dims2(*x);
                let mut dx = vec![E::zero(); rows * cols];
                for r in 0..rows {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &gd[r * cols..(r + 1) * cols];
                    let dot = yr
                        .iter()
                        .zip(gr)
                        .fold(E::zero(), |acc, (&p, &g)| acc + p * g);
                    for c in 0..cols {
                        dx[r * cols + c] = yr[c] * (gr[c] - dot);
                    }
                }
                self.accumulate(grads, *x, &dx);
            }
            Op::LogSoftmaxRows { x } => {
                let y = self.nodes[idx].value.data();
                let (rows, cols) = self.dims2(*x);
                let mut dx = vec![E::zero(); rows * cols];
                for r in 0..rows {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &gd[r * cols..(r + 1) * cols];
                    let gsum = gr.iter().fold(E::zero(), |acc, &g| acc + g);
                    for c in 0..cols {
                        dx[r * cols + c] = gr[c] - yr[c].exp() * gsum;
                    }
                }
                self.accumulate(grads, *x, &dx);
            }
            Op::DropoutApply { x, mask, keep_prob } => {
                let inv = E::one() / *keep_prob;
                let dx: Vec<E> = gd.iter().zip(mask).map(|(&g, &m)| g * m * inv).collect();
                self.accumulate(grads, *x, &dx);
            }
            Op::Scale { x, c } => {
                let dx: Vec<E> = gd.iter().map(|&g| g * *c).collect();
                self.accumulate(grads, *x, &dx);
            }
            Op::Sum { x } => {
                let seed = gd[0];
                let dx = vec![seed; self.value(*x).len()];
                self.accumulate(grads, *x, &dx);
            }
            Op::LnClamped { x } => {
                let lo = e::<E>(crate::element::PROB_FLOOR);
                let hi = E::one();
                let xv = self.value(*x).data();
                // Saturated clamp ⇒ zero gradient; inside the range d/dx = 1/x.
                let dx: Vec<E> = gd
                    .iter()
                    .zip(xv)
                    .map(|(&g, &v)| if v < lo || v > hi { E::zero() } else { g / v })
                    .collect();
                self.accumulate(grads, *x, &dx);
            }
        }
    }
}

/// `a[m,k] · b[k,n]` (or `b[n,k]ᵀ` when `b_transposed`), row-major.
fn matmul_raw<E: Element>(
    a: &[E],
    b: &[E],
    m: usize,
    k: usize,
    n: usize,
    b_transposed: bool,
) -> Vec<E> {
    let mut out = vec![E::zero(); m * n];
    if b_transposed {
        for i in 0..m {
            for j in 0..n {
                let mut acc = E::zero();
                for p in 0..k {
                    acc += a[i * k + p] * b[j * k + p];
                }
                out[i * n + j] = acc;
            }
        }
    } else {
        for i in 0..m {
            for p in 0..k {
                let av = a[i * k + p];
                let brow = &b[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
    }
    out
}

/// `a[m,k]ᵀ · g[m,n] → [k,n]`, row-major.
fn matmul_t_a<E: Element>(a: &[E], g: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::zero(); k * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            let grow = &g[i * n..(i + 1) * n];
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * grow[j];
            }
        }
    }
    out
}

/// Softmax of one row with max subtraction, written into `out`.
pub(crate) fn softmax_row<E: Element>(row: &[E], out: &mut [E]) {
    let max = row.iter().cloned().fold(E::neg_infinity(), E::max);
    let mut sum = E::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

// ── finite differences ─────────────────────────────────────────────────

/// Max over coordinates of `|analytic - central| / max(1, |central|)` where
/// `central` is the two-sided difference `(f(x+h) - f(x-h)) / 2h`.
///
/// `f` evaluates the recorded scalar function at an arbitrary point (it is
/// called twice per coordinate), `analytic` is the gradient produced by
/// [`Tape::backward`] at `point`.
pub fn finite_difference_check<E: Element>(
    mut f: impl FnMut(&TensorValue<E>) -> Result<E>,
    point: &TensorValue<E>,
    analytic: &TensorValue<E>,
    step: E,
) -> Result<E> {
    if point.shape() != analytic.shape() {
        return Err(Error::shape(
            "finite_difference_check",
            format!("point {:?} vs gradient {:?}", point.shape(), analytic.shape()),
        ));
    }
    let two = e::<E>(2.0);
    let mut worst = E::zero();
    let mut probe = point.clone();
    for i in 0..point.len() {
        let orig = point.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        let central = (up - down) / (two * step);
        let denom = E::max(E::one(), central.abs());
        let err = (analytic.data()[i] - central).abs() / denom;
        if err > worst {
            worst = err;
        }
    }
    Ok(worst)
}

/// Record `build` once for the analytic gradient, then compare against
/// central differences. Returns the max relative error.
pub fn fd_check_builder<E: Element>(
    build: impl Fn(&mut Tape<E>, TensorId) -> Result<TensorId>,
    point: &TensorValue<E>,
    step: E,
) -> Result<E> {
    let mut tape = Tape::new();
    let p = tape.leaf(point.clone());
    let loss = build(&mut tape, p)?;
    let grads = tape.backward(loss)?;
    let analytic = grads.get_or_zeros(p, point.shape());
    finite_difference_check(
        |x| {
            let mut t = Tape::new();
            let p = t.leaf(x.clone());
            let loss = build(&mut t, p)?;
            Ok(t.value(loss).item())
        },
        point,
        &analytic,
        step,
    )
}
