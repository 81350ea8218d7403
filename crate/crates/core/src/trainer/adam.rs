//! Adam with bias correction, plus global-norm gradient clipping.

use crate::element::Element;
use crate::model::{GradientSet, ModelParams};
use crate::tensor::TensorValue;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment buffers for one student's parameters.
#[derive(Debug, Clone)]
pub struct AdamState<E: Element> {
    m: Vec<TensorValue<E>>,
    v: Vec<TensorValue<E>>,
    t: u64,
}

impl<E: Element> AdamState<E> {
    pub fn new(params: &ModelParams<E>) -> Self {
        let zeros = |p: &ModelParams<E>| -> Vec<TensorValue<E>> {
            p.iter().map(|(_, t)| TensorValue::zeros(t.shape().to_vec())).collect()
        };
        AdamState { m: zeros(params), v: zeros(params), t: 0 }
    }

    pub fn timestep(&self) -> u64 {
        self.t
    }

    /// One Adam update in place. A zero gradient still advances the
    /// timestep (and decays the moments).
    pub fn step(&mut self, params: &mut ModelParams<E>, grads: &GradientSet<E>, lr: f64) {
        self.t += 1;
        let b1 = E::from_f64(ADAM_BETA1);
        let b2 = E::from_f64(ADAM_BETA2);
        let one_minus_b1 = E::from_f64(1.0 - ADAM_BETA1);
        let one_minus_b2 = E::from_f64(1.0 - ADAM_BETA2);
        let corr1 = E::from_f64(1.0 / (1.0 - ADAM_BETA1.powi(self.t as i32)));
        let corr2 = E::from_f64(1.0 / (1.0 - ADAM_BETA2.powi(self.t as i32)));
        let lr = E::from_f64(lr);
        let eps = E::from_f64(ADAM_EPS);
        for i in 0..self.m.len() {
            let theta = params.tensor_at_mut(i).data_mut();
            let g = grads.tensor_at(i).data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for k in 0..theta.len() {
                m[k] = b1 * m[k] + one_minus_b1 * g[k];
                v[k] = b2 * v[k] + one_minus_b2 * g[k] * g[k];
                let m_hat = m[k] * corr1;
                let v_hat = v[k] * corr2;
                theta[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Scale the whole gradient set so its global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_gradients<E: Element>(grads: &mut GradientSet<E>, max_norm: f64) -> f64 {
    let norm = grads.global_norm().as_f64();
    if norm > max_norm {
        grads.scale(E::from_f64(max_norm / norm));
    }
    norm
}
