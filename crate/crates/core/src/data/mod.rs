//! Bag ingestion and persistence, stratified splitting, survival-time
//! discretization, and synthetic multi-site data generation.
//!
//! On disk a dataset is a directory of bag files (one per bag, see
//! [`io::save_bag`]), a `manifest.csv` describing labels and split
//! assignments, and for survival tasks a `cuts.json` sidecar holding the
//! discretization cut points.

pub mod discretize;
pub mod io;
pub mod split;
pub mod synth;

pub use discretize::discretize_survival;
pub use io::{load_bag_features, load_dataset, load_manifest, save_bag, save_dataset};
pub use split::{stratified_split, SplitCase};
pub use synth::{generate_synthetic, SynthSite, SynthSpec};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::loss::SurvivalLabel;
use crate::Task;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad bag file {path}: {detail}")]
    HeaderMismatch { path: String, detail: String },
    #[error("bag file {path} contains non-finite values")]
    NonFinitePayload { path: String },
    #[error("empty bag: {bag_id}")]
    EmptyBag { bag_id: String },
    #[error("manifest parse error at line {line}: {detail}")]
    ManifestParse { line: u64, detail: String },
    #[error("manifest references missing bag files: {bag_ids:?}")]
    MissingBags { bag_ids: Vec<String> },
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("split fractions must be positive and sum to 1, got {0:?}")]
    InvalidFractions((f64, f64, f64)),
    #[error("site {0} has no cases")]
    EmptySite(u32),
    #[error("duplicate patient id in split input: {0}")]
    DuplicatePatient(String),
    #[error("survival discretization needs at least {need} uncensored cases, got {got}")]
    TooFewUncensored { need: usize, got: usize },
    #[error("non-increasing cut points: {0:?}")]
    NonIncreasingCuts(Vec<f64>),
    #[error("negative follow-up time {0}")]
    NegativeTime(f64),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
}

/// Which split a case belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

impl SplitKind {
    pub const ALL: [SplitKind; 3] = [SplitKind::Train, SplitKind::Val, SplitKind::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Val => "val",
            SplitKind::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(SplitKind::Train),
            "val" => Some(SplitKind::Val),
            "test" => Some(SplitKind::Test),
            _ => None,
        }
    }
}

/// Weak label attached to a bag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BagLabel {
    Class(usize),
    Survival(SurvivalLabel),
}

/// One training example: a matrix of instance embeddings plus a weak label.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBag {
    pub bag_id: String,
    pub site_id: u32,
    /// M x d_in instance embeddings.
    pub features: Array2<f32>,
    pub label: BagLabel,
}

impl FeatureBag {
    /// Instance matrix widened to f64 for numeric work.
    pub fn features_f64(&self) -> Array2<f64> {
        self.features.mapv(f64::from)
    }

    pub fn num_instances(&self) -> usize {
        self.features.nrows()
    }
}

/// One manifest row: where a bag lives and how it is labeled.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub bag_id: String,
    pub site_id: u32,
    pub split: SplitKind,
    pub task: Task,
    /// Class index, or survival time bin.
    pub label: usize,
    /// Survival only: censorship flag.
    pub censored: Option<bool>,
    /// Survival only: raw follow-up time.
    pub time: Option<f64>,
    /// Bag file path relative to the manifest; empty until saved.
    pub path: String,
}

/// Manifest plus the survival cut points shared by every split.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub task: Task,
    pub records: Vec<ManifestRecord>,
    /// t_1..t_{R-1}; present for survival datasets.
    pub cuts: Option<Vec<f64>>,
}

impl DatasetManifest {
    /// Structural checks that do not require bag files: unique bag ids,
    /// label fields consistent with the task, bins consistent with cuts.
    pub fn validate(&self) -> Result<(), DataError> {
        let mut seen = std::collections::HashSet::new();
        for record in &self.records {
            if !seen.insert(record.bag_id.as_str()) {
                return Err(DataError::InvalidManifest(format!(
                    "duplicate bag id {}",
                    record.bag_id
                )));
            }
            if record.task != self.task {
                return Err(DataError::InvalidManifest(format!(
                    "bag {} has task {} in a {} manifest",
                    record.bag_id, record.task, self.task
                )));
            }
            match self.task {
                Task::Classification => {
                    if record.censored.is_some() || record.time.is_some() {
                        return Err(DataError::InvalidManifest(format!(
                            "classification bag {} carries survival fields",
                            record.bag_id
                        )));
                    }
                }
                Task::Survival => {
                    let cuts = self.cuts.as_ref().ok_or_else(|| {
                        DataError::InvalidManifest("survival manifest without cut points".into())
                    })?;
                    let time = record.time.ok_or_else(|| {
                        DataError::InvalidManifest(format!(
                            "survival bag {} missing follow-up time",
                            record.bag_id
                        ))
                    })?;
                    if record.censored.is_none() {
                        return Err(DataError::InvalidManifest(format!(
                            "survival bag {} missing censorship flag",
                            record.bag_id
                        )));
                    }
                    let expected = discretize::assign_bin(time, cuts);
                    if record.label != expected {
                        return Err(DataError::InvalidManifest(format!(
                            "bag {}: bin {} inconsistent with time {} and cuts {:?}",
                            record.bag_id, record.label, time, cuts
                        )));
                    }
                }
            }
        }
        if let Some(cuts) = &self.cuts {
            if !cuts.windows(2).all(|w| w[0] < w[1]) {
                return Err(DataError::NonIncreasingCuts(cuts.clone()));
            }
        }
        Ok(())
    }

    /// Number of model outputs implied by the labels: classes for
    /// classification, hazard bins for survival.
    pub fn n_outputs(&self) -> usize {
        match self.task {
            Task::Classification => self
                .records
                .iter()
                .map(|r| r.label + 1)
                .max()
                .unwrap_or(0),
            Task::Survival => self.cuts.as_ref().map(|c| c.len() + 1).unwrap_or(0),
        }
    }
}

/// A fully loaded dataset: bags grouped by site and split, sites in
/// ascending id order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub task: Task,
    pub n_outputs: usize,
    pub d_in: usize,
    pub cuts: Option<Vec<f64>>,
    pub sites: Vec<SiteSplitData>,
}

#[derive(Debug, Clone, Default)]
pub struct SiteSplitData {
    pub site_id: u32,
    pub train: Vec<FeatureBag>,
    pub val: Vec<FeatureBag>,
    pub test: Vec<FeatureBag>,
}

impl Dataset {
    /// Group in-memory bags by the manifest's site and split assignments.
    pub fn assemble(manifest: &DatasetManifest, bags: Vec<FeatureBag>) -> Result<Self, DataError> {
        manifest.validate()?;
        let mut by_id: std::collections::HashMap<String, FeatureBag> =
            bags.into_iter().map(|b| (b.bag_id.clone(), b)).collect();

        let mut d_in = None;
        let mut sites: std::collections::BTreeMap<u32, SiteSplitData> =
            std::collections::BTreeMap::new();
        let mut missing = Vec::new();
        for record in &manifest.records {
            let Some(bag) = by_id.remove(&record.bag_id) else {
                missing.push(record.bag_id.clone());
                continue;
            };
            if bag.features.nrows() == 0 {
                return Err(DataError::EmptyBag {
                    bag_id: record.bag_id.clone(),
                });
            }
            match d_in {
                None => d_in = Some(bag.features.ncols()),
                Some(d) if d != bag.features.ncols() => {
                    return Err(DataError::InvalidManifest(format!(
                        "bag {} has {} feature columns, expected {}",
                        record.bag_id,
                        bag.features.ncols(),
                        d
                    )));
                }
                _ => {}
            }
            let site = sites.entry(record.site_id).or_insert_with(|| SiteSplitData {
                site_id: record.site_id,
                ..SiteSplitData::default()
            });
            match record.split {
                SplitKind::Train => site.train.push(bag),
                SplitKind::Val => site.val.push(bag),
                SplitKind::Test => site.test.push(bag),
            }
        }
        if !missing.is_empty() {
            return Err(DataError::MissingBags { bag_ids: missing });
        }

        Ok(Self {
            task: manifest.task,
            n_outputs: manifest.n_outputs(),
            d_in: d_in.ok_or_else(|| DataError::InvalidManifest("empty manifest".into()))?,
            cuts: manifest.cuts.clone(),
            sites: sites.into_values().collect(),
        })
    }

    /// All test bags pooled across sites, in ascending site order.
    pub fn pooled_test(&self) -> Vec<&FeatureBag> {
        self.sites.iter().flat_map(|s| s.test.iter()).collect()
    }

    pub fn site_ids(&self) -> Vec<u32> {
        self.sites.iter().map(|s| s.site_id).collect()
    }
}
