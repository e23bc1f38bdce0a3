//! The four sequential-encoder training objectives, as plain f64 functions.
//!
//! These are the reference forms used directly by tests and evaluation; the
//! training path builds the same math on the autodiff tape and is checked
//! against these in the unit tests.

use crate::error::{Error, Result};
use crate::event::NUM_EVENT_TYPES;

/// Next-event-type cross entropy: mean over positions of −Σ_k y_k ln ŷ_k.
/// Rows of `yhat` must be probability distributions.
pub fn loss_netp(y: &[[f64; NUM_EVENT_TYPES]], yhat: &[[f64; NUM_EVENT_TYPES]]) -> Result<f64> {
    if y.len() != yhat.len() {
        return Err(Error::shape(format!("netp rows {} vs {}", y.len(), yhat.len())));
    }
    if y.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (yr, pr) in y.iter().zip(yhat) {
        let sum: f64 = pr.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || pr.iter().any(|&p| p < 0.0) {
            return Err(Error::invalid(format!("netp: row is not a distribution (sum {sum})")));
        }
        for (yk, pk) in yr.iter().zip(pr) {
            if *yk != 0.0 {
                total -= yk * pk.ln();
            }
        }
    }
    Ok(total / y.len() as f64)
}

/// Time-delta mean squared error over the log(1+hours) gaps.
pub fn loss_tdp(delta: &[f64], delta_hat: &[f64]) -> Result<f64> {
    if delta.len() != delta_hat.len() {
        return Err(Error::shape(format!("tdp lengths {} vs {}", delta.len(), delta_hat.len())));
    }
    if delta.is_empty() {
        return Ok(0.0);
    }
    let sse: f64 = delta.iter().zip(delta_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sse / delta.len() as f64)
}

/// One sampled-softmax batch: per-query embeddings with a shared negative
/// set, per-negative proposal log-probabilities, and the temperature.
#[derive(Debug, Clone)]
pub struct SampledSoftmaxBatch {
    pub queries: Vec<Vec<f64>>,
    pub positives: Vec<Vec<f64>>,
    pub negatives: Vec<Vec<f64>>,
    /// log Q per negative (used by the logQ-corrected loss only).
    pub log_q: Vec<f64>,
    pub temperature: f64,
}

fn normalize(v: &[f64]) -> Result<Vec<f64>> {
    let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::invalid("zero-norm embedding"));
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn logsumexp(xs: &[f64]) -> f64 {
    let mx = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    mx + xs.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
}

fn check_batch(batch: &SampledSoftmaxBatch) -> Result<()> {
    if batch.queries.len() != batch.positives.len() {
        return Err(Error::shape("query/positive count mismatch".to_string()));
    }
    if batch.temperature <= 0.0 {
        return Err(Error::invalid("temperature must be positive"));
    }
    Ok(())
}

/// Sampled softmax over cosine similarities: mean over queries of
/// −ln( e^{s_p/τ} / (e^{s_p/τ} + Σ_n e^{s_n/τ}) ).
pub fn loss_nup(batch: &SampledSoftmaxBatch) -> Result<f64> {
    check_batch(batch)?;
    if batch.queries.is_empty() {
        return Ok(0.0);
    }
    let tau = batch.temperature;
    let negs: Vec<Vec<f64>> =
        batch.negatives.iter().map(|n| normalize(n)).collect::<Result<_>>()?;
    let mut total = 0.0;
    for (q, p) in batch.queries.iter().zip(&batch.positives) {
        let qn = normalize(q)?;
        let pn = normalize(p)?;
        let sp = dot(&qn, &pn) / tau;
        let mut logits = vec![sp];
        logits.extend(negs.iter().map(|n| dot(&qn, n) / tau));
        total += logsumexp(&logits) - sp;
    }
    Ok(total / batch.queries.len() as f64)
}

/// Sampled softmax with logQ correction and uncertainty weighting:
/// P(p|u) = e^{s_p/τ} / (e^{s_p/τ} + Σ_n e^{s_n/τ − logQ_n}), loss is the
/// mean of −w·ln P with w = stop_gradient(1 − P).
pub fn loss_nip(batch: &SampledSoftmaxBatch) -> Result<f64> {
    check_batch(batch)?;
    if batch.log_q.len() != batch.negatives.len() {
        return Err(Error::shape("logQ/negative count mismatch".to_string()));
    }
    if batch.log_q.iter().any(|q| q.is_nan()) {
        return Err(Error::invalid("non-finite logQ"));
    }
    if batch.queries.is_empty() {
        return Ok(0.0);
    }
    let tau = batch.temperature;
    let negs: Vec<Vec<f64>> =
        batch.negatives.iter().map(|n| normalize(n)).collect::<Result<_>>()?;
    let mut total = 0.0;
    for (q, p) in batch.queries.iter().zip(&batch.positives) {
        let qn = normalize(q)?;
        let pn = normalize(p)?;
        let sp = dot(&qn, &pn) / tau;
        let mut logits = vec![sp];
        logits
            .extend(negs.iter().zip(&batch.log_q).map(|(n, lq)| dot(&qn, n) / tau - lq));
        let log_p = sp - logsumexp(&logits);
        let w = 1.0 - log_p.exp();
        total -= w * log_p;
    }
    Ok(total / batch.queries.len() as f64)
}
