//! Importance-sampled weighted binary cross-entropy.
//!
//! For one supervised step with positive score `y_pos`, sampled
//! negative scores `y_neg` and their unnormalized proposal log-masses
//! `ln_q`, the weight of negative l is
//!
//!   w_l = softmax_l(y_l / T - ln q_l)
//!
//! and the step loss is -(log sigma(y_pos) + sum_l w_l log(1 - sigma(y_l))).
//! With the weighted flag off every negative contributes unweighted
//! (the vanilla BCE form). Weights are treated as constants by the
//! trainer; this module is the plain-value reference shared by tests
//! and the graph-side loss.

use crate::autodiff::softplus;
use crate::error::{PasrError, Result};

/// One supervised step's ingredients.
#[derive(Debug, Clone)]
pub struct StepLossInput {
    pub y_pos: f64,
    pub y_neg: Vec<f64>,
    pub ln_q: Vec<f64>,
    pub temperature: f64,
    pub weighted: bool,
}

/// Softmax over y_l / T - ln q_l, computed with max subtraction.
pub fn importance_weights(y_neg: &[f64], ln_q: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if y_neg.is_empty() || y_neg.len() != ln_q.len() {
        return Err(PasrError::Domain("importance_weights: bad input lengths".into()));
    }
    let logits: Vec<f64> = y_neg.iter().zip(ln_q).map(|(&y, &q)| y / temperature - q).collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Loss of a single step. log sigma terms go through softplus so the
/// extreme-score limits stay finite.
pub fn step_loss(step: &StepLossInput) -> Result<f64> {
    if step.y_neg.is_empty() {
        return Err(PasrError::Domain("step_loss: need at least one negative".into()));
    }
    // log sigma(y) = -softplus(-y); log(1 - sigma(y)) = -softplus(y)
    let pos_term = -softplus(-step.y_pos);
    let neg_term: f64 = if step.weighted {
        let w = importance_weights(&step.y_neg, &step.ln_q, step.temperature)?;
        step.y_neg.iter().zip(&w).map(|(&y, &wl)| wl * -softplus(y)).sum()
    } else {
        step.y_neg.iter().map(|&y| -softplus(y)).sum()
    };
    Ok(-(pos_term + neg_term))
}

/// Sum of step losses over a batch (pad steps must be pre-filtered).
pub fn weighted_bce_loss(steps: &[StepLossInput]) -> Result<f64> {
    steps.iter().map(step_loss).sum()
}

/// Max deviation of the weights from uniform 1/k at a large
/// temperature; used by the limit tests.
pub fn temperature_limit_check(y_neg: &[f64], ln_q: &[f64], t_large: f64) -> Result<f64> {
    let w = importance_weights(y_neg, ln_q, t_large)?;
    let k = w.len() as f64;
    Ok(w.iter().map(|wl| (wl - 1.0 / k).abs()).fold(0.0, f64::max))
}
