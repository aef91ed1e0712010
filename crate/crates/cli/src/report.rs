//! Run report structures and the machine-readable output files.
//!
//! `report.json` holds the config echo and per-round logs (including
//! wall-clock durations, the only non-reproducible field). `metrics.csv`
//! and `loss_curves.csv` contain only deterministic values and are
//! byte-identical across reruns of the same (config, seed).

use std::io::Write;
use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};

use fedbag_core::federation::RoundLog;
use fedbag_core::metrics::{ClassificationReport, KmCurve, SurvivalReport};
use fedbag_core::Task;

use crate::config::ExperimentConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TestReport {
    Classification(ClassificationReport),
    Survival(SurvivalReport),
}

/// Outcome of one (scenario, alpha) training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub scenario: String,
    /// Noise level; `None` for the non-federated baselines.
    pub alpha: Option<f64>,
    pub rounds_run: usize,
    pub best_round: usize,
    pub best_val_loss: Option<f64>,
    pub rounds: Vec<RoundLog>,
    pub test: TestReport,
}

impl RunRecord {
    /// File-name tag, e.g. `federated_a0.01` or `single_site_2`.
    pub fn tag(&self) -> String {
        let base = self.scenario.replace(':', "_");
        match self.alpha {
            Some(alpha) => format!("{base}_a{alpha}"),
            None => base,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub runs: Vec<RunRecord>,
}

impl RunReport {
    pub fn write_json(&self, path: &Path) -> anyhow::Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }

    /// The results table, one row per run, shaped by the task's metric set.
    pub fn write_metrics_csv(&self, path: &Path) -> anyhow::Result<()> {
        let file = std::fs::File::create(path)
            .with_context(|| format!("creating {}", path.display()))?;
        let mut writer = csv::Writer::from_writer(file);
        match self.config.task {
            Task::Classification => {
                writer.write_record([
                    "scenario",
                    "alpha",
                    "auc",
                    "auc_ci_low",
                    "auc_ci_high",
                    "error",
                    "balanced_accuracy",
                    "f1",
                    "map",
                    "cohens_kappa",
                ])?;
                for run in &self.runs {
                    let TestReport::Classification(r) = &run.test else {
                        anyhow::bail!("survival result in a classification report");
                    };
                    writer.write_record([
                        run.scenario.clone(),
                        alpha_cell(run.alpha),
                        r.auc.to_string(),
                        r.auc_ci_low.to_string(),
                        r.auc_ci_high.to_string(),
                        r.error.to_string(),
                        r.balanced_accuracy.to_string(),
                        r.f1.to_string(),
                        r.mean_average_precision.to_string(),
                        r.cohens_kappa.to_string(),
                    ])?;
                }
            }
            Task::Survival => {
                writer.write_record([
                    "scenario",
                    "alpha",
                    "c_index",
                    "log_rank_statistic",
                    "log_rank_p",
                ])?;
                for run in &self.runs {
                    let TestReport::Survival(r) = &run.test else {
                        anyhow::bail!("classification result in a survival report");
                    };
                    writer.write_record([
                        run.scenario.clone(),
                        alpha_cell(run.alpha),
                        r.c_index.to_string(),
                        r.log_rank_statistic.map(|v| v.to_string()).unwrap_or_default(),
                        r.log_rank_p.map(|v| v.to_string()).unwrap_or_default(),
                    ])?;
                }
            }
        }
        writer.flush()?;
        Ok(())
    }

    /// Long-format loss curves: one row per (run, round, site).
    pub fn write_loss_curves_csv(&self, path: &Path) -> anyhow::Result<()> {
        let file = std::fs::File::create(path)
            .with_context(|| format!("creating {}", path.display()))?;
        let mut writer = csv::Writer::from_writer(file);
        writer.write_record([
            "scenario",
            "alpha",
            "round",
            "site_id",
            "train_loss",
            "val_loss",
        ])?;
        for run in &self.runs {
            for round in &run.rounds {
                for site in &round.train_loss {
                    writer.write_record([
                        run.scenario.clone(),
                        alpha_cell(run.alpha),
                        round.round.to_string(),
                        site.site_id.to_string(),
                        site.loss.to_string(),
                        round.val_loss.to_string(),
                    ])?;
                }
            }
        }
        writer.flush()?;
        Ok(())
    }
}

fn alpha_cell(alpha: Option<f64>) -> String {
    alpha.map(|a| a.to_string()).unwrap_or_default()
}

/// ROC staircase points for external plotting.
pub fn write_roc_csv(points: &[(f64, f64)], path: &Path) -> anyhow::Result<()> {
    let mut file = std::fs::File::create(path)?;
    writeln!(file, "fpr,tpr")?;
    for (fpr, tpr) in points {
        writeln!(file, "{fpr},{tpr}")?;
    }
    Ok(())
}

/// Kaplan-Meier step functions for the two risk groups, long format.
pub fn write_km_csv(
    high: Option<&KmCurve>,
    low: Option<&KmCurve>,
    path: &Path,
) -> anyhow::Result<()> {
    let mut file = std::fs::File::create(path)?;
    writeln!(file, "group,time,survival,at_risk,events")?;
    for (name, curve) in [("high_risk", high), ("low_risk", low)] {
        let Some(curve) = curve else { continue };
        for i in 0..curve.times.len() {
            writeln!(
                file,
                "{name},{},{},{},{}",
                curve.times[i], curve.survival[i], curve.at_risk[i], curve.events[i]
            )?;
        }
    }
    Ok(())
}
