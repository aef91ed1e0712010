//! End-to-end training behavior: the degenerate-federation equivalence,
//! optimization sanity on separable data, and reproducibility under noise.

use fedbag_core::data::synth::{generate_synthetic, SynthSite, SynthSpec};
use fedbag_core::data::{BagLabel, Dataset};
use fedbag_core::federation::{site_datasets, train_centralized, train_federated, TrainConfig};
use fedbag_core::loss::cross_entropy;
use fedbag_core::metrics::roc_auc;
use fedbag_core::model::{forward_bag, ForwardMode, ModelDims, ModelWeights};
use fedbag_core::optim::EarlyStopConfig;
use fedbag_core::Task;

fn spec_one_site(seed: u64, cases: usize) -> SynthSpec {
    SynthSpec {
        task: Task::Classification,
        seed,
        d_in: 12,
        sites: vec![SynthSite {
            cases,
            class_proportions: None,
        }],
        n_classes: 2,
        censor_fraction: 0.3,
        survival_bins: 4,
        signal_scale: 1.5,
        noise_scale: 0.6,
        site_shift_scale: 0.0,
        bag_size: (4, 8),
        signal_fraction: 0.3,
        class_directions: None,
        split_fractions: (0.7, 0.15, 0.15),
    }
}

fn config(seed: u64, dims: ModelDims, rounds: usize) -> TrainConfig {
    let mut config = TrainConfig::new(Task::Classification, dims, seed);
    config.max_rounds = rounds;
    config.early_stop = EarlyStopConfig {
        min_rounds: 35,
        patience: 20,
    };
    config.record_round_weights = true;
    config
}

#[test]
fn federated_single_site_equals_centralized_every_round() {
    let (bags, manifest) = generate_synthetic(&spec_one_site(42, 40)).unwrap();
    let dataset = Dataset::assemble(&manifest, bags).unwrap();
    let sites = site_datasets(&dataset);
    assert_eq!(sites.len(), 1);
    assert_eq!(sites[0].site_id, 0);

    let cfg = config(42, ModelDims::new(12, 8, 6, 2), 20);
    let federated = train_federated(&cfg, &sites).unwrap();
    let centralized = train_centralized(&cfg, &sites).unwrap();

    let fed_rounds = federated.round_weights.unwrap();
    let cen_rounds = centralized.round_weights.unwrap();
    assert_eq!(fed_rounds.len(), 20);
    assert_eq!(cen_rounds.len(), 20);
    for (round, (a, b)) in fed_rounds.iter().zip(&cen_rounds).enumerate() {
        let diff = a.max_abs_diff(b);
        assert!(diff <= 1e-12, "round {}: diff {diff}", round + 1);
    }
    for (a, b) in federated.history.iter().zip(&centralized.history) {
        assert_eq!(a.val_loss, b.val_loss);
    }
}

fn eval_bag_loss(weights: &ModelWeights, bag: &fedbag_core::data::FeatureBag) -> f64 {
    let features = bag.features_f64();
    let trace = forward_bag(weights, &features.view(), ForwardMode::Eval).unwrap();
    let BagLabel::Class(class) = bag.label else {
        panic!("classification bag expected")
    };
    cross_entropy(&trace.logits.view(), class).unwrap().value
}

#[test]
fn single_bag_training_loss_is_non_increasing() {
    let mut spec = spec_one_site(7, 30);
    spec.noise_scale = 0.0; // separable
    let (bags, manifest) = generate_synthetic(&spec).unwrap();
    let dataset = Dataset::assemble(&manifest, bags).unwrap();

    let mut sites = site_datasets(&dataset);
    sites[0].train.truncate(1);
    let bag = sites[0].train[0].clone();

    let mut cfg = config(7, ModelDims::new(12, 8, 6, 2), 8);
    cfg.optimizer.learning_rate = 1e-3;
    let outcome = train_federated(&cfg, &sites).unwrap();

    let mut losses = vec![eval_bag_loss(
        &fedbag_core::model::init_weights(cfg.dims, cfg.seed),
        &bag,
    )];
    for weights in outcome.round_weights.as_ref().unwrap() {
        losses.push(eval_bag_loss(weights, &bag));
    }
    for (i, pair) in losses.windows(2).enumerate() {
        assert!(
            pair[1] <= pair[0] + 1e-9,
            "loss rose at epoch {}: {} -> {}",
            i + 1,
            pair[0],
            pair[1]
        );
    }
    assert!(losses.last().unwrap() < &losses[0]);
}

#[test]
fn separable_data_reaches_train_auc_one() {
    let mut spec = spec_one_site(13, 60);
    spec.noise_scale = 0.0;
    spec.signal_fraction = 0.1; // one signal instance in most bags
    let (bags, manifest) = generate_synthetic(&spec).unwrap();
    let dataset = Dataset::assemble(&manifest, bags).unwrap();
    let sites = site_datasets(&dataset);

    let mut cfg = config(13, ModelDims::new(12, 8, 6, 2), 30);
    cfg.optimizer.learning_rate = 2e-3;
    let outcome = train_centralized(&cfg, &sites).unwrap();

    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for bag in &sites[0].train {
        let features = bag.features_f64();
        let trace = forward_bag(&outcome.weights, &features.view(), ForwardMode::Eval).unwrap();
        // Softmax is monotone in the logit difference; rank by it directly.
        scores.push(trace.logits[1] - trace.logits[0]);
        let BagLabel::Class(class) = bag.label else {
            panic!()
        };
        labels.push(class == 1);
    }
    let auc = roc_auc(&scores, &labels).unwrap();
    assert_eq!(auc, 1.0, "train AUC {auc}");
}

#[test]
fn noisy_runs_are_reproducible_across_thread_pools() {
    let mut spec = spec_one_site(21, 30);
    spec.sites.push(SynthSite {
        cases: 24,
        class_proportions: None,
    });
    let (bags, manifest) = generate_synthetic(&spec).unwrap();
    let dataset = Dataset::assemble(&manifest, bags).unwrap();
    let sites = site_datasets(&dataset);

    let mut cfg = config(21, ModelDims::new(12, 8, 6, 2), 4);
    cfg.privacy.alpha = 0.1;

    let serial = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(|| train_federated(&cfg, &sites).unwrap());
    let parallel = rayon::ThreadPoolBuilder::new()
        .num_threads(4)
        .build()
        .unwrap()
        .install(|| train_federated(&cfg, &sites).unwrap());

    assert_eq!(serial.weights, parallel.weights);
    for (a, b) in serial.history.iter().zip(&parallel.history) {
        assert_eq!(a.val_loss, b.val_loss);
        assert_eq!(a.noise, b.noise);
    }
}

#[test]
fn clients_stay_bit_equal_to_global_after_every_round() {
    use fedbag_core::federation::{
        aggregate, local_epoch, pooled_validation_loss, synchronize, ClientSite,
    };
    use fedbag_core::optim::AdamState;

    let mut spec = spec_one_site(33, 30);
    spec.sites.push(SynthSite {
        cases: 20,
        class_proportions: None,
    });
    let (bags, manifest) = generate_synthetic(&spec).unwrap();
    let dataset = Dataset::assemble(&manifest, bags).unwrap();

    let mut cfg = config(33, ModelDims::new(12, 8, 6, 2), 5);
    cfg.privacy.alpha = 0.05;

    let init = fedbag_core::model::init_weights(cfg.dims, cfg.seed);
    let mut sites: Vec<ClientSite> = site_datasets(&dataset)
        .into_iter()
        .map(|s| ClientSite {
            site_id: s.site_id,
            train: s.train,
            val: s.val,
            weights: init.clone(),
            optimizer: AdamState::new(cfg.optimizer, cfg.dims),
        })
        .collect();

    for round in 1..=5 {
        for site in sites.iter_mut() {
            local_epoch(site, &cfg, round).unwrap();
        }
        let uploads: Vec<(u32, &ModelWeights)> =
            sites.iter().map(|s| (s.site_id, &s.weights)).collect();
        let (global, _) = aggregate(&uploads, &cfg.privacy, cfg.seed, round).unwrap();
        synchronize(&global, &mut sites);
        for site in &sites {
            assert_eq!(site.weights, global, "round {round}");
        }
        let val = pooled_validation_loss(&global, &sites, &cfg).unwrap();
        assert!(val.is_finite());
    }
}
