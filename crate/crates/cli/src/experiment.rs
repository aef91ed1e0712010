//! Scenario sweep execution: resolve the dataset, train every
//! (scenario, alpha) combination, evaluate on the pooled test set, and emit
//! the report files.

use std::path::Path;

use anyhow::{bail, Context};
use ndarray::Array2;

use fedbag_core::data::synth::generate_synthetic;
use fedbag_core::data::{load_dataset, BagLabel, Dataset, FeatureBag};
use fedbag_core::federation::checkpoint::save_checkpoint;
use fedbag_core::federation::{
    site_datasets, train_centralized, train_federated, train_single_site, SiteDataset,
    TrainConfig, TrainOutcome,
};
use fedbag_core::loss::{hazards, risk_score};
use fedbag_core::metrics::{classification_report, roc_points, survival_report};
use fedbag_core::model::{forward_bag, ForwardMode, ModelDims, ModelWeights};
use fedbag_core::Task;

use crate::config::{ExperimentConfig, Scenario};
use crate::report::{write_km_csv, write_roc_csv, RunRecord, RunReport, TestReport};

/// Load or generate the dataset named by the config.
pub fn resolve_dataset(config: &ExperimentConfig) -> anyhow::Result<Dataset> {
    let dataset = match (&config.dataset.manifest, &config.dataset.synth) {
        (Some(path), None) => load_dataset(path)
            .with_context(|| format!("loading dataset from {}", path.display()))?,
        (None, Some(spec)) => {
            let (bags, manifest) = generate_synthetic(spec)?;
            Dataset::assemble(&manifest, bags)?
        }
        _ => bail!("configuration must name exactly one dataset source"),
    };
    if dataset.task != config.task {
        bail!(
            "dataset task {} does not match configured task {}",
            dataset.task,
            config.task
        );
    }
    Ok(dataset)
}

/// Model dimensions implied by config overrides plus the dataset.
pub fn resolve_dims(config: &ExperimentConfig, dataset: &Dataset) -> anyhow::Result<ModelDims> {
    let d_in = match config.model.d_in {
        Some(d) if d != dataset.d_in => {
            bail!("model.d_in = {d} but the dataset has {} features", dataset.d_in)
        }
        _ => dataset.d_in,
    };
    let n_out = match config.model.n_out {
        Some(n) if n != dataset.n_outputs => bail!(
            "model.n_out = {n} but the dataset implies {} outputs",
            dataset.n_outputs
        ),
        _ => dataset.n_outputs,
    };
    Ok(ModelDims::new(d_in, config.model.d_proj, config.model.d_attn, n_out))
}

fn train_config(config: &ExperimentConfig, dims: ModelDims, alpha: f64) -> TrainConfig {
    let mut privacy = config.privacy.clone();
    privacy.alpha = alpha;
    TrainConfig {
        task: config.task,
        dims,
        optimizer: config.optimizer,
        survival_beta: config.survival_beta,
        early_stop: config.early_stop,
        max_rounds: config.max_rounds,
        privacy,
        seed: config.seed,
        reset_optimizer_each_round: false,
        record_round_weights: false,
    }
}

/// Evaluate trained weights on a test set, producing the task's report.
pub fn evaluate_test_set(
    task: Task,
    weights: &ModelWeights,
    test: &[&FeatureBag],
) -> anyhow::Result<TestReport> {
    if test.is_empty() {
        bail!("empty test set");
    }
    match task {
        Task::Classification => {
            let n_out = weights.dims.n_out;
            let mut probs = Array2::<f64>::zeros((test.len(), n_out));
            let mut labels = Vec::with_capacity(test.len());
            for (i, bag) in test.iter().enumerate() {
                let features = bag.features_f64();
                let trace = forward_bag(weights, &features.view(), ForwardMode::Eval)?;
                let max = trace.logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps = trace.logits.mapv(|s| (s - max).exp());
                let total = exps.sum();
                for (c, &e) in exps.iter().enumerate() {
                    probs[[i, c]] = e / total;
                }
                let BagLabel::Class(class) = bag.label else {
                    bail!("survival label in classification test set ({})", bag.bag_id)
                };
                labels.push(class);
            }
            Ok(TestReport::Classification(classification_report(
                &probs.view(),
                &labels,
            )?))
        }
        Task::Survival => {
            let mut risks = Vec::with_capacity(test.len());
            let mut times = Vec::with_capacity(test.len());
            let mut censored = Vec::with_capacity(test.len());
            for bag in test {
                let features = bag.features_f64();
                let trace = forward_bag(weights, &features.view(), ForwardMode::Eval)?;
                let h = hazards(&trace.logits.view());
                risks.push(risk_score(&h.view()));
                let BagLabel::Survival(label) = bag.label else {
                    bail!("class label in survival test set ({})", bag.bag_id)
                };
                times.push(label.time);
                censored.push(label.censored);
            }
            Ok(TestReport::Survival(survival_report(
                &risks, &times, &censored,
            )?))
        }
    }
}

fn run_one(
    config: &ExperimentConfig,
    dims: ModelDims,
    sites: &[SiteDataset],
    scenario: Scenario,
    alpha: Option<f64>,
) -> anyhow::Result<TrainOutcome> {
    let cfg = train_config(config, dims, alpha.unwrap_or(0.0));
    let outcome = match scenario {
        Scenario::Federated => train_federated(&cfg, sites)?,
        Scenario::Centralized => train_centralized(&cfg, sites)?,
        Scenario::SingleSite(id) => train_single_site(&cfg, sites, id)?,
    };
    Ok(outcome)
}

/// Classification scores used for ROC export: positive-class probability
/// for binary problems.
fn binary_scores(
    weights: &ModelWeights,
    test: &[&FeatureBag],
) -> anyhow::Result<Option<(Vec<f64>, Vec<bool>)>> {
    if weights.dims.n_out != 2 {
        return Ok(None);
    }
    let mut scores = Vec::with_capacity(test.len());
    let mut labels = Vec::with_capacity(test.len());
    for bag in test {
        let features = bag.features_f64();
        let trace = forward_bag(weights, &features.view(), ForwardMode::Eval)?;
        let max = trace.logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps = trace.logits.mapv(|s| (s - max).exp());
        scores.push(exps[1] / exps.sum());
        let BagLabel::Class(class) = bag.label else {
            bail!("survival label in classification test set")
        };
        labels.push(class == 1);
    }
    Ok(Some((scores, labels)))
}

/// Execute the full scenario sweep and write all output files into
/// `out_dir`: `report.json`, `metrics.csv`, `loss_curves.csv`, one
/// checkpoint per run, and per-run ROC or KM curves.
pub fn run_experiment(config: &ExperimentConfig, out_dir: &Path) -> anyhow::Result<RunReport> {
    config.validate()?;
    let dataset = resolve_dataset(config)?;
    let dims = resolve_dims(config, &dataset)?;
    let sites = site_datasets(&dataset);
    let test = dataset.pooled_test();
    if test.is_empty() {
        bail!("dataset has no test bags");
    }

    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    let checkpoint_dir = out_dir.join("checkpoints");
    std::fs::create_dir_all(&checkpoint_dir)?;

    let mut runs = Vec::new();
    for &scenario in &config.scenarios {
        let alphas: Vec<Option<f64>> = if scenario.uses_alpha() {
            config.alphas.iter().map(|&a| Some(a)).collect()
        } else {
            vec![None]
        };
        for alpha in alphas {
            log::info!("running scenario {scenario} alpha {alpha:?}");
            let outcome = run_one(config, dims, &sites, scenario, alpha)
                .with_context(|| format!("scenario {scenario}, alpha {alpha:?}"))?;
            let test_report = evaluate_test_set(config.task, &outcome.weights, &test)?;

            let record = RunRecord {
                scenario: scenario.to_string(),
                alpha,
                rounds_run: outcome.rounds_run,
                best_round: outcome.best_round,
                best_val_loss: outcome.best_val_loss,
                rounds: outcome.history,
                test: test_report,
            };

            save_checkpoint(
                &checkpoint_dir.join(format!("{}.fbag", record.tag())),
                &outcome.weights,
                None,
            )?;
            match &record.test {
                TestReport::Classification(_) => {
                    if let Some((scores, labels)) = binary_scores(&outcome.weights, &test)? {
                        let points = roc_points(&scores, &labels)?;
                        write_roc_csv(&points, &out_dir.join(format!("roc_{}.csv", record.tag())))?;
                    }
                }
                TestReport::Survival(r) => {
                    write_km_csv(
                        r.km_high_risk.as_ref(),
                        r.km_low_risk.as_ref(),
                        &out_dir.join(format!("km_{}.csv", record.tag())),
                    )?;
                }
            }
            runs.push(record);
        }
    }

    let report = RunReport {
        config: config.clone(),
        runs,
    };
    report.write_json(&out_dir.join("report.json"))?;
    report.write_metrics_csv(&out_dir.join("metrics.csv"))?;
    report.write_loss_curves_csv(&out_dir.join("loss_curves.csv"))?;
    Ok(report)
}
