//! Federated weakly-supervised learning on bag-structured feature data.
//!
//! A bag is a set of instance embeddings (one matrix per example) carrying a
//! single weak label: a class index, or a discretized survival time with a
//! censorship flag. The model pools instances with gated attention and is
//! trained across simulated institutional sites with federated averaging,
//! optionally blurring uploaded weights with Gaussian noise for differential
//! privacy.
//!
//! Module map:
//! - [`model`]: the attention network, forward pass and exact gradients
//! - [`loss`]: cross-entropy and the discrete-time survival likelihood
//! - [`optim`]: Adam with L2 decay, validation-loss early stopping
//! - [`privacy`]: the Gaussian weight-perturbation mechanism and (ε, δ) bounds
//! - [`federation`]: round orchestration, aggregation, checkpoints
//! - [`data`]: bag files, manifests, splits, survival discretization,
//!   synthetic multi-site generation
//! - [`metrics`]: AUC/DeLong, classification report, c-index, log-rank,
//!   Kaplan-Meier
//! - [`rng`]: named deterministic random streams

pub mod data;
pub mod federation;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod privacy;
pub mod rng;

use serde::{Deserialize, Serialize};

/// Prediction task supported by the engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification,
    Survival,
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Task::Classification => write!(f, "classification"),
            Task::Survival => write!(f, "survival"),
        }
    }
}
