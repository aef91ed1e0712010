//! Bag-level losses: cross-entropy for classification, and the negative
//! log likelihood of a discrete-time survival model with right censoring.
//!
//! Survival conventions: logits index hazard bins r = 0..R-1, the hazard is
//! h_r = sigmoid(s_r), and the survival function is the cumulative product
//! f_surv(r) = prod_{u=0..r} (1 - h_u) with f_surv(-1) = 1 so that the
//! uncensored likelihood term at bin 0 is well defined.

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Floor applied to log arguments so saturated sigmoids keep losses finite.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("class index {class} out of range for {n_out} logits")]
    ClassOutOfRange { class: usize, n_out: usize },
    #[error("survival bin {bin} out of range for {n_out} hazard bins")]
    BinOutOfRange { bin: usize, n_out: usize },
    #[error("beta must lie in [0, 1], got {0}")]
    InvalidBeta(f64),
    #[error("non-finite logits")]
    NonFiniteLogits,
}

/// Weak label for survival prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurvivalLabel {
    /// Discrete time bin in 0..R-1.
    pub bin: usize,
    /// True when the event was not observed within follow-up.
    pub censored: bool,
    /// Raw follow-up time in the dataset's time unit.
    pub time: f64,
}

/// A scalar loss together with its gradient at the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Array1<f64>,
}

fn check_finite(logits: &ArrayView1<f64>) -> Result<(), LossError> {
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(LossError::NonFiniteLogits);
    }
    Ok(())
}

/// Softmax cross-entropy, stabilized with log-sum-exp.
pub fn cross_entropy(logits: &ArrayView1<f64>, class: usize) -> Result<LossValue, LossError> {
    check_finite(logits)?;
    let n_out = logits.len();
    if class >= n_out {
        return Err(LossError::ClassOutOfRange { class, n_out });
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = logits.iter().map(|s| (s - max).exp()).sum::<f64>().ln() + max;
    let value = log_sum - logits[class];
    let mut grad = logits.mapv(|s| (s - log_sum).exp());
    grad[class] -= 1.0;
    Ok(LossValue { value, grad })
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-bin hazard probabilities h_r = sigmoid(s_r).
pub fn hazards(logits: &ArrayView1<f64>) -> Array1<f64> {
    logits.mapv(sigmoid)
}

/// Survival probabilities for r = -1..R-1 as a vector of length R+1:
/// index 0 holds f_surv(-1) = 1 and index r+1 holds f_surv(r).
pub fn survival_curve(hazard: &ArrayView1<f64>) -> Array1<f64> {
    let mut out = Array1::zeros(hazard.len() + 1);
    out[0] = 1.0;
    let mut acc = 1.0;
    for (r, &h) in hazard.iter().enumerate() {
        acc *= 1.0 - h;
        out[r + 1] = acc;
    }
    out
}

/// Negative log likelihood of the discrete survival model.
///
/// Censored cases contribute -log f_surv(Y); uncensored cases contribute
/// -log f_surv(Y-1) - log h_Y. The gradient is exact for the unclamped
/// likelihood; the clamp only guards the reported value.
pub fn survival_nll(
    logits: &ArrayView1<f64>,
    label: &SurvivalLabel,
) -> Result<LossValue, LossError> {
    check_finite(logits)?;
    let r_bins = logits.len();
    if label.bin >= r_bins {
        return Err(LossError::BinOutOfRange {
            bin: label.bin,
            n_out: r_bins,
        });
    }
    let h = hazards(logits);
    let surv = survival_curve(&h.view());
    let y = label.bin;

    let mut grad = Array1::zeros(r_bins);
    let value = if label.censored {
        // -log f_surv(Y); d/ds_r = h_r for r <= Y.
        for r in 0..=y {
            grad[r] = h[r];
        }
        -surv[y + 1].max(LOG_CLAMP).ln()
    } else {
        // -log f_surv(Y-1) - log h_Y.
        for r in 0..y {
            grad[r] = h[r];
        }
        grad[y] = -(1.0 - h[y]);
        -surv[y].max(LOG_CLAMP).ln() - h[y].max(LOG_CLAMP).ln()
    };
    Ok(LossValue { value, grad })
}

/// Survival loss with uncensored upweighting:
/// (1 - beta) * L + beta * L_uncensored.
///
/// Both uncensored likelihood terms carry a (1 - c) factor, so for an
/// uncensored case the weighted loss equals L, and for a censored case it
/// equals (1 - beta) * L.
pub fn survival_loss(
    logits: &ArrayView1<f64>,
    label: &SurvivalLabel,
    beta: f64,
) -> Result<LossValue, LossError> {
    if !(0.0..=1.0).contains(&beta) || beta.is_nan() {
        return Err(LossError::InvalidBeta(beta));
    }
    let mut loss = survival_nll(logits, label)?;
    if label.censored {
        loss.value *= 1.0 - beta;
        loss.grad.mapv_inplace(|g| g * (1.0 - beta));
    }
    Ok(loss)
}

/// Scalar risk score: the negative sum of survival probabilities over all
/// bins (negative restricted expected survival). Strictly increasing in
/// every hazard, so higher means shorter expected survival.
pub fn risk_score(hazard: &ArrayView1<f64>) -> f64 {
    let surv = survival_curve(hazard);
    -surv.iter().skip(1).sum::<f64>()
}
