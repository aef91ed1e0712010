//! Federated training orchestration.
//!
//! Each round every site runs one local epoch (per-bag Adam updates in a
//! seeded shuffle order), uploads a noise-perturbed copy of its weights, the
//! server averages the uploads into the global model, and every site is
//! synchronized to the result. Early stopping monitors the pooled
//! validation loss of the global model and returns the best checkpoint.
//!
//! Sites may train concurrently: every random draw comes from a stream named
//! by (seed, site, round, ...), aggregation sums in ascending site order,
//! and validation pools per-site sums in site order, so results are
//! identical under any scheduling.

pub mod checkpoint;

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{BagLabel, Dataset, FeatureBag};
use crate::loss::{cross_entropy, survival_loss, LossValue};
use crate::model::{
    backward_bag, forward_bag, init_weights, ForwardMode, ModelDims, ModelWeights,
};
use crate::optim::{
    adam_step, AdamHyper, AdamState, EarlyStopConfig, EarlyStopDecision, EarlyStopState,
};
use crate::privacy::{noise_report, perturb_weights, NoiseReport, PrivacyConfig};
use crate::rng::derive_rng;
use crate::Task;

#[derive(Debug, Error)]
pub enum FederationError {
    #[error("no sites provided")]
    NoSites,
    #[error("duplicate site id {0}")]
    DuplicateSite(u32),
    #[error("unknown site id {0}")]
    UnknownSite(u32),
    #[error("site {0} has no training bags")]
    NoTrainingData(u32),
    #[error("no validation bags across all sites")]
    NoValidationData,
    #[error("client weight shapes differ across sites")]
    ShapeMismatch,
    #[error("round {round}, site {site_id}, bag {bag_id}: {source}")]
    BagFailure {
        round: usize,
        site_id: u32,
        bag_id: String,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error("round {round}: {source}")]
    RoundFailure {
        round: usize,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error("bag {bag_id} label does not match task {task}")]
    LabelMismatch { bag_id: String, task: Task },
}

/// Training inputs of one site (its own train and validation splits).
#[derive(Debug, Clone)]
pub struct SiteDataset {
    pub site_id: u32,
    pub train: Vec<FeatureBag>,
    pub val: Vec<FeatureBag>,
}

/// Extract per-site training inputs from a loaded dataset.
pub fn site_datasets(dataset: &Dataset) -> Vec<SiteDataset> {
    dataset
        .sites
        .iter()
        .map(|s| SiteDataset {
            site_id: s.site_id,
            train: s.train.clone(),
            val: s.val.clone(),
        })
        .collect()
}

/// One client: local data plus its model replica and optimizer state.
#[derive(Debug, Clone)]
pub struct ClientSite {
    pub site_id: u32,
    pub train: Vec<FeatureBag>,
    pub val: Vec<FeatureBag>,
    pub weights: ModelWeights,
    pub optimizer: AdamState,
}

/// Everything that parameterizes a training run.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub task: Task,
    pub dims: ModelDims,
    pub optimizer: AdamHyper,
    /// Uncensored upweighting for the survival loss.
    pub survival_beta: f64,
    pub early_stop: EarlyStopConfig,
    /// Hard cap on federated rounds (K).
    pub max_rounds: usize,
    pub privacy: PrivacyConfig,
    pub seed: u64,
    /// Discard Adam moments at the start of every round instead of letting
    /// them persist across synchronizations.
    pub reset_optimizer_each_round: bool,
    /// Keep a snapshot of the global weights after every round (tests).
    pub record_round_weights: bool,
}

impl TrainConfig {
    pub fn new(task: Task, dims: ModelDims, seed: u64) -> Self {
        Self {
            task,
            dims,
            optimizer: AdamHyper::default(),
            survival_beta: 0.15,
            early_stop: EarlyStopConfig::default(),
            max_rounds: 100,
            privacy: PrivacyConfig::default(),
            seed,
            reset_optimizer_each_round: false,
            record_round_weights: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteLoss {
    pub site_id: u32,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteNoise {
    pub site_id: u32,
    pub report: NoiseReport,
}

/// Per-round record kept in the run history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub train_loss: Vec<SiteLoss>,
    pub val_loss: f64,
    pub noise: Vec<SiteNoise>,
    pub duration_secs: f64,
}

/// Result of a training run: the checkpoint with the lowest pooled
/// validation loss plus the full round history.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: ModelWeights,
    pub best_round: usize,
    pub best_val_loss: Option<f64>,
    pub rounds_run: usize,
    pub history: Vec<RoundLog>,
    /// Global weights after every round, when recording was requested.
    pub round_weights: Option<Vec<ModelWeights>>,
}

/// Loss and logit gradient for one bag under the configured task.
pub fn bag_loss(
    task: Task,
    survival_beta: f64,
    logits: &ndarray::ArrayView1<f64>,
    bag: &FeatureBag,
) -> Result<LossValue, FederationError> {
    match (task, &bag.label) {
        (Task::Classification, BagLabel::Class(class)) => cross_entropy(logits, *class)
            .map_err(|e| FederationError::BagFailure {
                round: 0,
                site_id: bag.site_id,
                bag_id: bag.bag_id.clone(),
                source: Box::new(e),
            }),
        (Task::Survival, BagLabel::Survival(label)) => {
            survival_loss(logits, label, survival_beta).map_err(|e| FederationError::BagFailure {
                round: 0,
                site_id: bag.site_id,
                bag_id: bag.bag_id.clone(),
                source: Box::new(e),
            })
        }
        _ => Err(FederationError::LabelMismatch {
            bag_id: bag.bag_id.clone(),
            task,
        }),
    }
}

fn with_round(err: FederationError, round: usize) -> FederationError {
    match err {
        FederationError::BagFailure {
            site_id,
            bag_id,
            source,
            ..
        } => FederationError::BagFailure {
            round,
            site_id,
            bag_id,
            source,
        },
        other => other,
    }
}

/// One pass over the site's training bags in a seeded shuffle order, with a
/// forward/backward/Adam update per bag. Returns the mean training loss.
pub fn local_epoch(
    site: &mut ClientSite,
    config: &TrainConfig,
    round: usize,
) -> Result<f64, FederationError> {
    let site_tag = format!("site={}", site.site_id);
    let round_tag = format!("round={round}");

    let mut order: Vec<usize> = (0..site.train.len()).collect();
    {
        use rand::seq::SliceRandom;
        let mut rng = derive_rng(config.seed, &["shuffle", &site_tag, &round_tag]);
        order.shuffle(&mut rng);
    }

    let mut total = 0.0;
    for idx in order {
        let bag = &site.train[idx];
        let bag_err = |source: Box<dyn std::error::Error + Send + Sync>| {
            FederationError::BagFailure {
                round,
                site_id: site.site_id,
                bag_id: bag.bag_id.clone(),
                source,
            }
        };

        let features = bag.features_f64();
        let mut dropout_rng = derive_rng(
            config.seed,
            &["dropout", &site_tag, &round_tag, &bag.bag_id],
        );
        let trace = forward_bag(
            &site.weights,
            &features.view(),
            ForwardMode::Train(&mut dropout_rng),
        )
        .map_err(|e| bag_err(Box::new(e)))?;

        let loss = bag_loss(config.task, config.survival_beta, &trace.logits.view(), bag)
            .map_err(|e| with_round(e, round))?;
        let grads = backward_bag(&site.weights, &trace, &loss.grad.view())
            .map_err(|e| bag_err(Box::new(e)))?;
        adam_step(&mut site.optimizer, &mut site.weights, &grads)
            .map_err(|e| bag_err(Box::new(e)))?;
        total += loss.value;
    }
    Ok(total / site.train.len() as f64)
}

/// Server-side averaging of noise-perturbed client weights:
/// W_global = (1/B) * sum_i (W_i + noise_i), summed in ascending site order.
pub fn aggregate(
    clients: &[(u32, &ModelWeights)],
    privacy: &PrivacyConfig,
    seed: u64,
    round: usize,
) -> Result<(ModelWeights, Vec<SiteNoise>), FederationError> {
    if clients.is_empty() {
        return Err(FederationError::NoSites);
    }
    let dims = clients[0].1.dims;
    if clients.iter().any(|(_, w)| w.dims != dims) {
        return Err(FederationError::ShapeMismatch);
    }

    let mut order: Vec<usize> = (0..clients.len()).collect();
    order.sort_by_key(|&i| clients[i].0);

    let round_tag = format!("round={round}");
    let mut sum: Option<ModelWeights> = None;
    let mut reports = Vec::with_capacity(clients.len());
    for &i in &order {
        let (site_id, weights) = clients[i];
        reports.push(SiteNoise {
            site_id,
            report: noise_report(weights, privacy),
        });
        let site_tag = format!("site={site_id}");
        let perturbed = perturb_weights(weights, privacy.alpha, &mut |tensor| {
            derive_rng(seed, &["noise", &site_tag, &round_tag, tensor])
        })
        .map_err(|e| FederationError::RoundFailure {
            round,
            source: Box::new(e),
        })?;

        match &mut sum {
            None => sum = Some(perturbed),
            Some(acc) => {
                for ((_, mut a), (_, p)) in
                    acc.tensors_mut().into_iter().zip(perturbed.tensors())
                {
                    a.zip_mut_with(&p, |x, y| *x += y);
                }
            }
        }
    }

    let mut global = sum.expect("at least one client");
    let scale = 1.0 / clients.len() as f64;
    for (_, mut tensor) in global.tensors_mut() {
        tensor.mapv_inplace(|x| x * scale);
    }
    Ok((global, reports))
}

/// Copy the global weights into every site. Optimizer state is untouched.
pub fn synchronize(global: &ModelWeights, sites: &mut [ClientSite]) {
    for site in sites {
        site.weights = global.clone();
    }
}

/// Mean loss of `weights` over all sites' validation bags (eval mode,
/// pooled). Per-site sums are computed independently and combined in
/// ascending site order.
pub fn pooled_validation_loss(
    weights: &ModelWeights,
    sites: &[ClientSite],
    config: &TrainConfig,
) -> Result<f64, FederationError> {
    let per_site: Vec<Result<(f64, usize), FederationError>> = sites
        .par_iter()
        .map(|site| {
            let mut sum = 0.0;
            for bag in &site.val {
                let features = bag.features_f64();
                let trace = forward_bag(weights, &features.view(), ForwardMode::Eval).map_err(
                    |e| FederationError::BagFailure {
                        round: 0,
                        site_id: site.site_id,
                        bag_id: bag.bag_id.clone(),
                        source: Box::new(e),
                    },
                )?;
                let loss =
                    bag_loss(config.task, config.survival_beta, &trace.logits.view(), bag)?;
                sum += loss.value;
            }
            Ok((sum, site.val.len()))
        })
        .collect();

    let mut total = 0.0;
    let mut count = 0usize;
    for result in per_site {
        let (sum, n) = result?;
        total += sum;
        count += n;
    }
    if count == 0 {
        return Err(FederationError::NoValidationData);
    }
    Ok(total / count as f64)
}

fn build_sites(
    config: &TrainConfig,
    data: &[SiteDataset],
    global: &ModelWeights,
) -> Result<Vec<ClientSite>, FederationError> {
    if data.is_empty() {
        return Err(FederationError::NoSites);
    }
    let mut sorted: Vec<&SiteDataset> = data.iter().collect();
    sorted.sort_by_key(|s| s.site_id);
    for pair in sorted.windows(2) {
        if pair[0].site_id == pair[1].site_id {
            return Err(FederationError::DuplicateSite(pair[0].site_id));
        }
    }
    sorted
        .into_iter()
        .map(|s| {
            if s.train.is_empty() {
                return Err(FederationError::NoTrainingData(s.site_id));
            }
            Ok(ClientSite {
                site_id: s.site_id,
                train: s.train.clone(),
                val: s.val.clone(),
                weights: global.clone(),
                optimizer: AdamState::new(config.optimizer, config.dims),
            })
        })
        .collect()
}

/// Run the full federated loop and return the checkpoint with the lowest
/// pooled validation loss (or the initial weights when `max_rounds` is 0).
pub fn train_federated(
    config: &TrainConfig,
    data: &[SiteDataset],
) -> Result<TrainOutcome, FederationError> {
    let global_init = init_weights(config.dims, config.seed);
    let mut sites = build_sites(config, data, &global_init)?;

    let mut early_stop = EarlyStopState::new(config.early_stop);
    let mut history = Vec::new();
    let mut round_weights = config.record_round_weights.then(Vec::new);
    let mut rounds_run = 0;

    for round in 1..=config.max_rounds {
        let started = Instant::now();
        if config.reset_optimizer_each_round {
            for site in &mut sites {
                site.optimizer = AdamState::new(config.optimizer, config.dims);
            }
        }

        let losses: Vec<f64> = sites
            .par_iter_mut()
            .map(|site| local_epoch(site, config, round))
            .collect::<Result<_, _>>()?;

        let uploads: Vec<(u32, &ModelWeights)> =
            sites.iter().map(|s| (s.site_id, &s.weights)).collect();
        let (global, noise) = aggregate(&uploads, &config.privacy, config.seed, round)?;
        synchronize(&global, &mut sites);

        let val_loss = pooled_validation_loss(&global, &sites, config)?;
        history.push(RoundLog {
            round,
            train_loss: sites
                .iter()
                .zip(&losses)
                .map(|(s, &loss)| SiteLoss {
                    site_id: s.site_id,
                    loss,
                })
                .collect(),
            val_loss,
            noise,
            duration_secs: started.elapsed().as_secs_f64(),
        });
        if let Some(snapshots) = &mut round_weights {
            snapshots.push(global.clone());
        }
        rounds_run = round;

        let decision = early_stop
            .update(round, val_loss, &global)
            .map_err(|e| FederationError::RoundFailure {
                round,
                source: Box::new(e),
            })?;
        if decision == EarlyStopDecision::Stop {
            log::info!(
                "early stop at round {round} (best round {} with loss {:.6})",
                early_stop.best_round,
                early_stop.best_loss,
            );
            break;
        }
    }

    let (weights, best_round, best_val_loss) = match early_stop.best_checkpoint() {
        Some((w, round, loss)) => (w.clone(), round, Some(loss)),
        None => (global_init, 0, None),
    };
    Ok(TrainOutcome {
        weights,
        best_round,
        best_val_loss,
        rounds_run,
        history,
        round_weights,
    })
}

/// Pool every site's training and validation data into a single site
/// (id 0, bags concatenated in ascending site order) and train without
/// noise: the centralized baseline.
pub fn train_centralized(
    config: &TrainConfig,
    data: &[SiteDataset],
) -> Result<TrainOutcome, FederationError> {
    if data.is_empty() {
        return Err(FederationError::NoSites);
    }
    let mut sorted: Vec<&SiteDataset> = data.iter().collect();
    sorted.sort_by_key(|s| s.site_id);
    let pooled = SiteDataset {
        site_id: 0,
        train: sorted.iter().flat_map(|s| s.train.iter().cloned()).collect(),
        val: sorted.iter().flat_map(|s| s.val.iter().cloned()).collect(),
    };
    let mut config = config.clone();
    config.privacy.alpha = 0.0;
    train_federated(&config, &[pooled])
}

/// Train on one site's data only (no noise). Evaluation against the shared
/// test set happens downstream.
pub fn train_single_site(
    config: &TrainConfig,
    data: &[SiteDataset],
    site_id: u32,
) -> Result<TrainOutcome, FederationError> {
    let site = data
        .iter()
        .find(|s| s.site_id == site_id)
        .ok_or(FederationError::UnknownSite(site_id))?;
    let mut config = config.clone();
    config.privacy.alpha = 0.0;
    train_federated(&config, &[site.clone()])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate_synthetic, SynthSite, SynthSpec};
    use crate::data::Dataset;

    fn tiny_spec(seed: u64) -> SynthSpec {
        SynthSpec {
            task: Task::Classification,
            seed,
            d_in: 8,
            sites: vec![
                SynthSite {
                    cases: 24,
                    class_proportions: None,
                },
                SynthSite {
                    cases: 20,
                    class_proportions: None,
                },
            ],
            n_classes: 2,
            censor_fraction: 0.3,
            survival_bins: 4,
            signal_scale: 1.5,
            noise_scale: 0.5,
            site_shift_scale: 0.2,
            bag_size: (3, 6),
            signal_fraction: 0.4,
            class_directions: None,
            split_fractions: (0.7, 0.15, 0.15),
        }
    }

    fn tiny_sites(seed: u64) -> Vec<SiteDataset> {
        let (bags, manifest) = generate_synthetic(&tiny_spec(seed)).unwrap();
        let dataset = Dataset::assemble(&manifest, bags).unwrap();
        site_datasets(&dataset)
    }

    fn tiny_config(seed: u64) -> TrainConfig {
        let mut config = TrainConfig::new(Task::Classification, ModelDims::new(8, 6, 4, 2), seed);
        config.max_rounds = 3;
        config.early_stop = EarlyStopConfig {
            min_rounds: 35,
            patience: 20,
        };
        config
    }

    #[test]
    fn zero_rounds_returns_initial_weights_and_empty_history() {
        let sites = tiny_sites(1);
        let mut config = tiny_config(1);
        config.max_rounds = 0;
        let outcome = train_federated(&config, &sites).unwrap();
        assert!(outcome.history.is_empty());
        assert_eq!(outcome.best_round, 0);
        assert_eq!(outcome.weights, init_weights(config.dims, 1));
    }

    #[test]
    fn zero_learning_rate_leaves_weights_unchanged() {
        let sites = tiny_sites(2);
        let mut config = tiny_config(2);
        config.optimizer.learning_rate = 0.0;
        config.optimizer.weight_decay = 0.0;
        config.max_rounds = 1;
        config.record_round_weights = true;
        let outcome = train_federated(&config, &sites).unwrap();
        let initial = init_weights(config.dims, 2);
        let after = &outcome.round_weights.unwrap()[0];
        assert!(initial.max_abs_diff(after) < 1e-15);
        // Training losses are finite and equal to the dataset loss at init.
        for site_loss in &outcome.history[0].train_loss {
            assert!(site_loss.loss.is_finite());
        }
    }

    #[test]
    fn run_is_bit_reproducible() {
        let sites = tiny_sites(3);
        let config = tiny_config(3);
        let a = train_federated(&config, &sites).unwrap();
        let b = train_federated(&config, &sites).unwrap();
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.history.len(), b.history.len());
        for (ra, rb) in a.history.iter().zip(&b.history) {
            assert_eq!(ra.val_loss, rb.val_loss);
            assert_eq!(ra.train_loss, rb.train_loss);
        }
    }

    #[test]
    fn reproducible_across_thread_counts() {
        let sites = tiny_sites(4);
        let config = tiny_config(4);
        let serial = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| train_federated(&config, &sites).unwrap());
        let parallel = rayon::ThreadPoolBuilder::new()
            .num_threads(8)
            .build()
            .unwrap()
            .install(|| train_federated(&config, &sites).unwrap());
        assert_eq!(serial.weights, parallel.weights);
        assert_eq!(
            serial.history.last().unwrap().val_loss,
            parallel.history.last().unwrap().val_loss
        );
    }

    #[test]
    fn aggregate_identical_clients_is_identity_at_alpha_zero() {
        let w = init_weights(ModelDims::new(8, 6, 4, 2), 9);
        let clients = vec![(0u32, &w), (1u32, &w), (2u32, &w)];
        let privacy = PrivacyConfig::default();
        let (global, noise) = aggregate(&clients, &privacy, 1, 1).unwrap();
        // (w + w + w) / 3 is exact arithmetic-mean up to one rounding step.
        assert!(global.max_abs_diff(&w) <= 1e-15);
        assert_eq!(noise.len(), 3);
    }

    #[test]
    fn aggregate_two_clients_scalar_mean() {
        let dims = ModelDims::new(2, 2, 2, 1);
        let mut a = ModelWeights::zeros(dims);
        let mut b = ModelWeights::zeros(dims);
        a.b_pred[0] = 1.0;
        b.b_pred[0] = 3.0;
        let clients = vec![(0u32, &a), (1u32, &b)];
        let (global, _) = aggregate(&clients, &PrivacyConfig::default(), 1, 1).unwrap();
        assert_eq!(global.b_pred[0], 2.0);
    }

    #[test]
    fn aggregate_order_is_fixed_by_site_id() {
        let dims = ModelDims::new(3, 3, 2, 1);
        let weights: Vec<ModelWeights> = (0..4)
            .map(|i| init_weights(dims, 100 + i as u64))
            .collect();
        let forward: Vec<(u32, &ModelWeights)> =
            (0..4).map(|i| (i as u32, &weights[i])).collect();
        let reversed: Vec<(u32, &ModelWeights)> =
            (0..4).rev().map(|i| (i as u32, &weights[i])).collect();
        let (a, _) = aggregate(&forward, &PrivacyConfig::default(), 7, 2).unwrap();
        let (b, _) = aggregate(&reversed, &PrivacyConfig::default(), 7, 2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn synchronize_copies_and_isolates() {
        let sites_data = tiny_sites(5);
        let config = tiny_config(5);
        let global = init_weights(config.dims, 5);
        let mut sites = build_sites(&config, &sites_data, &global).unwrap();
        let fresh = init_weights(config.dims, 99);
        synchronize(&fresh, &mut sites);
        for site in &sites {
            assert_eq!(site.weights, fresh);
        }
        // Idempotent.
        synchronize(&fresh, &mut sites);
        for site in &sites {
            assert_eq!(site.weights, fresh);
        }
        // Mutating one site leaves the others and the global copy intact.
        sites[0].weights.b_pred[0] += 1.0;
        assert_eq!(sites[1].weights, fresh);
    }

    #[test]
    fn duplicate_and_unknown_sites_are_rejected() {
        let mut sites = tiny_sites(6);
        let config = tiny_config(6);
        sites[1].site_id = sites[0].site_id;
        assert!(matches!(
            train_federated(&config, &sites),
            Err(FederationError::DuplicateSite(_))
        ));

        let sites = tiny_sites(6);
        assert!(matches!(
            train_single_site(&config, &sites, 42),
            Err(FederationError::UnknownSite(42))
        ));
    }

    #[test]
    fn single_site_is_definitionally_federated_with_one_site() {
        let sites = tiny_sites(7);
        let config = tiny_config(7);
        let single = train_single_site(&config, &sites, 0).unwrap();
        let direct = train_federated(&config, &sites[..1]).unwrap();
        assert_eq!(single.weights, direct.weights);
    }

    #[test]
    fn centralized_pools_all_training_data() {
        let sites = tiny_sites(8);
        let total: usize = sites.iter().map(|s| s.train.len()).sum();
        let mut sorted: Vec<&SiteDataset> = sites.iter().collect();
        sorted.sort_by_key(|s| s.site_id);
        let pooled = SiteDataset {
            site_id: 0,
            train: sorted
                .iter()
                .flat_map(|s| s.train.iter().cloned())
                .collect(),
            val: sorted.iter().flat_map(|s| s.val.iter().cloned()).collect(),
        };
        assert_eq!(pooled.train.len(), total);

        let config = tiny_config(8);
        let centralized = train_centralized(&config, &sites).unwrap();
        let manual = train_federated(&config, &[pooled]).unwrap();
        assert_eq!(centralized.weights, manual.weights);
    }
}
