//! Adam with coupled L2 weight decay, and the validation-loss early-stopping
//! controller used by the federated training loop.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Gradients, ModelDims, ModelWeights};

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("non-finite gradient in tensor {0}")]
    NonFiniteGradient(&'static str),
    #[error("non-finite validation loss at round {0}")]
    NonFiniteLoss(usize),
    #[error("rounds must be presented in increasing order: got {got} after {previous}")]
    NonMonotonicRound { got: usize, previous: usize },
}

/// Adam hyperparameters. Weight decay is coupled: it is added to the raw
/// gradient before the moment updates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// Per-tensor first/second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub hyper: AdamHyper,
    pub t: u64,
    pub m: Gradients,
    pub v: Gradients,
}

impl AdamState {
    pub fn new(hyper: AdamHyper, dims: ModelDims) -> Self {
        Self {
            hyper,
            t: 0,
            m: Gradients::zeros(dims),
            v: Gradients::zeros(dims),
        }
    }
}

/// One bias-corrected Adam update over every tensor. The step counter
/// increments exactly once per call; tensors update independently.
pub fn adam_step(
    state: &mut AdamState,
    weights: &mut ModelWeights,
    grads: &Gradients,
) -> Result<(), OptimError> {
    for (name, g) in grads.tensors() {
        if g.iter().any(|x| !x.is_finite()) {
            return Err(OptimError::NonFiniteGradient(name));
        }
    }

    state.t += 1;
    let h = state.hyper;
    let bc1 = 1.0 - h.beta1.powi(state.t as i32);
    let bc2 = 1.0 - h.beta2.powi(state.t as i32);

    let mut m_tensors = state.m.tensors_mut();
    let mut v_tensors = state.v.tensors_mut();
    let mut w_tensors = weights.tensors_mut();
    let g_tensors = grads.tensors();

    for i in 0..w_tensors.len() {
        let (_, w) = &mut w_tensors[i];
        let (_, m) = &mut m_tensors[i];
        let (_, v) = &mut v_tensors[i];
        let (_, g) = &g_tensors[i];
        for ((w, m), (v, g)) in w
            .iter_mut()
            .zip(m.iter_mut())
            .zip(v.iter_mut().zip(g.iter()))
        {
            let grad = g + h.weight_decay * *w;
            *m = h.beta1 * *m + (1.0 - h.beta1) * grad;
            *v = h.beta2 * *v + (1.0 - h.beta2) * grad * grad;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *w -= h.learning_rate * m_hat / (v_hat.sqrt() + h.epsilon);
        }
    }
    Ok(())
}

/// Early stopping rule: stop at the first round `k` with
/// `k >= min_rounds` and `k - best_round >= patience`, where `best_round`
/// is the last round whose validation loss strictly improved on the best.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EarlyStopConfig {
    pub min_rounds: usize,
    pub patience: usize,
}

impl Default for EarlyStopConfig {
    fn default() -> Self {
        Self {
            min_rounds: 35,
            patience: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EarlyStopDecision {
    Continue,
    Stop,
}

/// Tracks the best validation loss and the weight snapshot to return.
#[derive(Debug, Clone)]
pub struct EarlyStopState {
    pub config: EarlyStopConfig,
    pub best_loss: f64,
    pub best_round: usize,
    last_round: usize,
    best_weights: Option<ModelWeights>,
}

impl EarlyStopState {
    pub fn new(config: EarlyStopConfig) -> Self {
        Self {
            config,
            best_loss: f64::INFINITY,
            best_round: 0,
            last_round: 0,
            best_weights: None,
        }
    }

    /// Record the validation loss of `round` (1-based, strictly increasing)
    /// and decide whether training should stop.
    pub fn update(
        &mut self,
        round: usize,
        val_loss: f64,
        weights: &ModelWeights,
    ) -> Result<EarlyStopDecision, OptimError> {
        if !val_loss.is_finite() {
            return Err(OptimError::NonFiniteLoss(round));
        }
        if round <= self.last_round {
            return Err(OptimError::NonMonotonicRound {
                got: round,
                previous: self.last_round,
            });
        }
        self.last_round = round;

        if val_loss < self.best_loss {
            self.best_loss = val_loss;
            self.best_round = round;
            self.best_weights = Some(weights.clone());
        }

        let stalled = round - self.best_round;
        if round >= self.config.min_rounds && stalled >= self.config.patience {
            Ok(EarlyStopDecision::Stop)
        } else {
            Ok(EarlyStopDecision::Continue)
        }
    }

    pub fn rounds_since_improvement(&self) -> usize {
        self.last_round - self.best_round
    }

    /// The checkpoint with the lowest validation loss seen so far.
    pub fn best_checkpoint(&self) -> Option<(&ModelWeights, usize, f64)> {
        self.best_weights
            .as_ref()
            .map(|w| (w, self.best_round, self.best_loss))
    }
}
