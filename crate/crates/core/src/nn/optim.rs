//! Adam with global-norm clipping and a warmup-then-constant schedule.

use std::collections::BTreeMap;

use crate::nn::graph::Gradients;
use crate::nn::params::ParamStore;
use crate::scalar::Scalar;

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm<S: Scalar>(grads: &mut Gradients<S>, max_norm: f64) -> f64 {
    let norm = grads.squared_norm().sqrt();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}

/// Linear warmup from `lr_start` to `lr_peak` over `warmup_steps`, constant
/// afterwards. `step` is 1-based.
pub fn warmup_lr(step: u64, lr_start: f64, lr_peak: f64, warmup_steps: u64) -> f64 {
    if warmup_steps == 0 || step >= warmup_steps {
        lr_peak
    } else {
        lr_start + (lr_peak - lr_start) * step as f64 / warmup_steps as f64
    }
}

/// Adam moments; parameters with sparse gradients get lazy row-wise updates
/// (untouched rows keep their moments and values).
pub struct AdamState<S: Scalar> {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: BTreeMap<usize, Vec<S>>,
    v: BTreeMap<usize, Vec<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new() -> Self {
        AdamState { step: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// One Adam update. `lr_for_group` maps a parameter's group tag to its
    /// learning rate.
    pub fn step(
        &mut self,
        store: &mut ParamStore<S>,
        grads: &Gradients<S>,
        lr_for_group: impl Fn(u32) -> f64,
    ) {
        self.step += 1;
        let t = self.step as i32;
        let b1 = S::of(self.beta1);
        let b2 = S::of(self.beta2);
        let one_m_b1 = S::of(1.0 - self.beta1);
        let one_m_b2 = S::of(1.0 - self.beta2);
        let eps = S::of(self.eps);
        let bc1 = S::of(1.0 - self.beta1.powi(t));
        let bc2 = S::of(1.0 - self.beta2.powi(t));

        for (&pid, g) in &grads.dense {
            let lr = S::of(lr_for_group(store.get(pid).group));
            let len = g.len();
            let m = self.m.entry(pid).or_insert_with(|| vec![S::zero(); len]);
            let v = self.v.entry(pid).or_insert_with(|| vec![S::zero(); len]);
            let p = store.get_mut(pid);
            for i in 0..len {
                m[i] = b1 * m[i] + one_m_b1 * g[i];
                v[i] = b2 * v[i] + one_m_b2 * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.data[i] = p.data[i] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        for (&pid, rows) in &grads.sparse {
            let lr = S::of(lr_for_group(store.get(pid).group));
            let total = store.get(pid).len();
            let cols = store.get(pid).cols;
            let m = self.m.entry(pid).or_insert_with(|| vec![S::zero(); total]);
            let v = self.v.entry(pid).or_insert_with(|| vec![S::zero(); total]);
            let p = store.get_mut(pid);
            for (&row, g) in rows {
                let base = row * cols;
                for j in 0..cols {
                    let i = base + j;
                    m[i] = b1 * m[i] + one_m_b1 * g[j];
                    v[i] = b2 * v[i] + one_m_b2 * g[j] * g[j];
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    p.data[i] = p.data[i] - lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
    }
}

impl<S: Scalar> Default for AdamState<S> {
    fn default() -> Self {
        Self::new()
    }
}
