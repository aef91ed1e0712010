//! Synthetic multi-site bag generation.
//!
//! Classification bags mix signal instances (class direction plus a
//! site-specific offset plus Gaussian noise) with pure-noise background
//! instances. Survival bags encode a latent risk scalar in the magnitude of
//! their signal instances, and the same scalar drives an exponential event
//! time, so higher-risk bags fail sooner. Censoring is an independent coin
//! flip that truncates the observed follow-up.
//!
//! All randomness is drawn from per-(site, case) named streams, so
//! generation is deterministic per seed and independent of iteration order.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{
    discretize, split::SplitCase, stratified_split, BagLabel, DataError, DatasetManifest,
    FeatureBag, ManifestRecord,
};
use crate::loss::SurvivalLabel;
use crate::rng::derive_rng;
use crate::Task;

/// Baseline exponential event rate at latent risk 0.
const BASE_EVENT_RATE: f64 = 0.02;
/// Log-rate increase from latent risk 0 to 1.
const RISK_LOG_RATE: f64 = 6.0;

fn default_n_classes() -> usize {
    2
}
fn default_censor_fraction() -> f64 {
    0.3
}
fn default_survival_bins() -> usize {
    4
}
fn default_scale_one() -> f64 {
    1.0
}
fn default_shift() -> f64 {
    0.0
}
fn default_bag_size() -> (usize, usize) {
    (8, 24)
}
fn default_signal_fraction() -> f64 {
    0.2
}
fn default_fractions() -> (f64, f64, f64) {
    (0.7, 0.15, 0.15)
}

/// Case count and optional class mix of one synthetic site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSite {
    pub cases: usize,
    /// Classification only; uniform when absent. Must sum to 1.
    #[serde(default)]
    pub class_proportions: Option<Vec<f64>>,
}

/// Full description of a synthetic multi-site dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub task: Task,
    pub seed: u64,
    pub d_in: usize,
    pub sites: Vec<SynthSite>,
    #[serde(default = "default_n_classes")]
    pub n_classes: usize,
    #[serde(default = "default_censor_fraction")]
    pub censor_fraction: f64,
    #[serde(default = "default_survival_bins")]
    pub survival_bins: usize,
    /// Magnitude of the class/risk direction in signal instances.
    #[serde(default = "default_scale_one")]
    pub signal_scale: f64,
    /// Std of the isotropic Gaussian noise on every instance.
    #[serde(default = "default_scale_one")]
    pub noise_scale: f64,
    /// Magnitude of the per-site offset added to signal instances.
    #[serde(default = "default_shift")]
    pub site_shift_scale: f64,
    /// Inclusive bag-size range [min, max].
    #[serde(default = "default_bag_size")]
    pub bag_size: (usize, usize),
    /// Fraction of instances per bag that carry signal.
    #[serde(default = "default_signal_fraction")]
    pub signal_fraction: f64,
    /// Explicit unit class directions (classification); derived
    /// orthonormal directions when absent.
    #[serde(default)]
    pub class_directions: Option<Vec<Vec<f64>>>,
    #[serde(default = "default_fractions")]
    pub split_fractions: (f64, f64, f64),
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let err = |msg: String| Err(DataError::InvalidSpec(msg));
        if self.sites.is_empty() {
            return err("at least one site required".into());
        }
        if self.d_in == 0 {
            return err("d_in must be >= 1".into());
        }
        if self.bag_size.0 < 1 || self.bag_size.0 > self.bag_size.1 {
            return err(format!("bad bag size range {:?}", self.bag_size));
        }
        if !(0.0..=1.0).contains(&self.signal_fraction) {
            return err(format!("signal_fraction {} not in [0,1]", self.signal_fraction));
        }
        for (i, site) in self.sites.iter().enumerate() {
            if site.cases == 0 {
                return Err(DataError::EmptySite(i as u32));
            }
            if let Some(props) = &site.class_proportions {
                if props.len() != self.n_classes {
                    return err(format!(
                        "site {i}: {} proportions for {} classes",
                        props.len(),
                        self.n_classes
                    ));
                }
                if props.iter().any(|&p| p < 0.0)
                    || (props.iter().sum::<f64>() - 1.0).abs() > 1e-6
                {
                    return err(format!("site {i}: proportions must sum to 1"));
                }
            }
        }
        match self.task {
            Task::Classification => {
                if self.n_classes < 2 {
                    return err("classification needs >= 2 classes".into());
                }
                if self.n_classes > self.d_in {
                    return err("more classes than feature dimensions".into());
                }
                if let Some(dirs) = &self.class_directions {
                    if dirs.len() != self.n_classes
                        || dirs.iter().any(|d| d.len() != self.d_in)
                    {
                        return err("class_directions shape mismatch".into());
                    }
                }
            }
            Task::Survival => {
                if self.survival_bins < 2 {
                    return err("survival needs >= 2 bins".into());
                }
                if !(0.0..=1.0).contains(&self.censor_fraction) {
                    return err(format!(
                        "censor_fraction {} not in [0,1]",
                        self.censor_fraction
                    ));
                }
            }
        }
        Ok(())
    }
}

fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Array1<f64> {
    loop {
        let v = Array1::from_shape_fn(d, |_| rng.sample::<f64, _>(StandardNormal));
        let norm = v.dot(&v).sqrt();
        if norm > 1e-9 {
            return v / norm;
        }
    }
}

/// Orthonormal class directions, either user-provided (normalized) or drawn
/// from the seed and Gram-Schmidt orthogonalized.
fn class_directions(spec: &SynthSpec) -> Vec<Array1<f64>> {
    if let Some(dirs) = &spec.class_directions {
        return dirs
            .iter()
            .map(|d| {
                let v = Array1::from_vec(d.clone());
                let norm = v.dot(&v).sqrt().max(1e-12);
                v / norm
            })
            .collect();
    }
    let mut rng = derive_rng(spec.seed, &["synth", "class_dirs"]);
    let mut dirs: Vec<Array1<f64>> = Vec::with_capacity(spec.n_classes);
    while dirs.len() < spec.n_classes {
        let mut v = unit_vector(&mut rng, spec.d_in);
        for existing in &dirs {
            let proj = v.dot(existing);
            v = v - existing * proj;
        }
        let norm = v.dot(&v).sqrt();
        if norm > 1e-6 {
            dirs.push(v / norm);
        }
    }
    dirs
}

fn sample_class(rng: &mut ChaCha8Rng, proportions: Option<&Vec<f64>>, n_classes: usize) -> usize {
    let u: f64 = rng.random();
    match proportions {
        Some(props) => {
            let mut acc = 0.0;
            for (c, &p) in props.iter().enumerate() {
                acc += p;
                if u < acc {
                    return c;
                }
            }
            n_classes - 1
        }
        None => ((u * n_classes as f64) as usize).min(n_classes - 1),
    }
}

fn build_features(
    rng: &mut ChaCha8Rng,
    spec: &SynthSpec,
    signal: &Array1<f64>,
    site_offset: &Array1<f64>,
    m: usize,
    n_signal: usize,
) -> Array2<f32> {
    let mut features = Array2::<f32>::zeros((m, spec.d_in));
    for i in 0..m {
        let carries_signal = i < n_signal;
        for j in 0..spec.d_in {
            let noise: f64 = rng.sample::<f64, _>(StandardNormal) * spec.noise_scale;
            let value = if carries_signal {
                signal[j] + site_offset[j] + noise
            } else {
                noise
            };
            features[[i, j]] = value as f32;
        }
    }
    features
}

struct RawCase {
    bag_id: String,
    site_id: u32,
    features: Array2<f32>,
    class: usize,       // classification
    time: f64,          // survival
    censored: bool,     // survival
}

/// Generate bags plus a manifest with stratified splits assigned.
///
/// For survival, stratification uses provisional bins from all uncensored
/// event times; the cut points shipped with the manifest (and used for the
/// labels everywhere) are recomputed from the training split only.
pub fn generate_synthetic(
    spec: &SynthSpec,
) -> Result<(Vec<FeatureBag>, DatasetManifest), DataError> {
    spec.validate()?;

    let dirs = match spec.task {
        Task::Classification => class_directions(spec),
        Task::Survival => {
            vec![unit_vector(
                &mut derive_rng(spec.seed, &["synth", "risk_dir"]),
                spec.d_in,
            )]
        }
    };

    let site_offsets: Vec<Array1<f64>> = (0..spec.sites.len())
        .map(|i| {
            let mut rng = derive_rng(spec.seed, &["synth", "site_offset", &i.to_string()]);
            unit_vector(&mut rng, spec.d_in) * spec.site_shift_scale
        })
        .collect();

    let mut cases = Vec::new();
    for (site_idx, site) in spec.sites.iter().enumerate() {
        let site_id = site_idx as u32;
        for case_idx in 0..site.cases {
            let mut rng = derive_rng(
                spec.seed,
                &[
                    "synth",
                    &format!("site={site_id}"),
                    &format!("case={case_idx}"),
                ],
            );
            let m = rng.random_range(spec.bag_size.0..=spec.bag_size.1);
            let n_signal = if spec.signal_fraction > 0.0 {
                ((spec.signal_fraction * m as f64).round() as usize).clamp(1, m)
            } else {
                0
            };

            let (class, time, censored, signal) = match spec.task {
                Task::Classification => {
                    let class =
                        sample_class(&mut rng, site.class_proportions.as_ref(), spec.n_classes);
                    let signal = &dirs[class] * spec.signal_scale;
                    (class, 0.0, false, signal)
                }
                Task::Survival => {
                    let risk: f64 = rng.random();
                    let signal = &dirs[0] * (spec.signal_scale * (0.25 + risk));
                    let rate = BASE_EVENT_RATE * (RISK_LOG_RATE * risk).exp();
                    let u: f64 = rng.random();
                    let event_time = -(1.0 - u).ln() / rate;
                    let censored = rng.random::<f64>() < spec.censor_fraction;
                    let time = if censored {
                        event_time * rng.random::<f64>()
                    } else {
                        event_time
                    };
                    (0, time, censored, signal)
                }
            };

            let features = build_features(
                &mut rng,
                spec,
                &signal,
                &site_offsets[site_idx],
                m,
                n_signal,
            );
            cases.push(RawCase {
                bag_id: format!("site{site_id}_case{case_idx}"),
                site_id,
                features,
                class,
                time,
                censored,
            });
        }
    }

    // Stratify: class for classification, (provisional bin, censorship) for
    // survival. Provisional bins come from all uncensored event times.
    let strata: Vec<String> = match spec.task {
        Task::Classification => cases.iter().map(|c| format!("class={}", c.class)).collect(),
        Task::Survival => {
            let times: Vec<f64> = cases.iter().map(|c| c.time).collect();
            let censorship: Vec<bool> = cases.iter().map(|c| c.censored).collect();
            let (_, provisional) =
                discretize::discretize_survival(&times, &censorship, spec.survival_bins)?;
            cases
                .iter()
                .zip(&provisional)
                .map(|(c, bin)| format!("bin={bin},c={}", c.censored as u8))
                .collect()
        }
    };

    let split_cases: Vec<SplitCase> = cases
        .iter()
        .zip(&strata)
        .map(|(c, stratum)| SplitCase {
            patient_id: c.bag_id.clone(),
            site_id: c.site_id,
            stratum: stratum.clone(),
        })
        .collect();
    let splits = stratified_split(&split_cases, spec.split_fractions, spec.seed)?;

    // For survival, the shipped cut points come from the training split only.
    let cuts = match spec.task {
        Task::Classification => None,
        Task::Survival => {
            let train_times: Vec<f64> = cases
                .iter()
                .zip(&splits)
                .filter(|(_, &s)| s == super::SplitKind::Train)
                .map(|(c, _)| c.time)
                .collect();
            let train_censored: Vec<bool> = cases
                .iter()
                .zip(&splits)
                .filter(|(_, &s)| s == super::SplitKind::Train)
                .map(|(c, _)| c.censored)
                .collect();
            let (cuts, _) =
                discretize::discretize_survival(&train_times, &train_censored, spec.survival_bins)?;
            Some(cuts)
        }
    };

    let mut bags = Vec::with_capacity(cases.len());
    let mut records = Vec::with_capacity(cases.len());
    for (case, split) in cases.into_iter().zip(splits) {
        let (label, bag_label, censored, time) = match spec.task {
            Task::Classification => (case.class, BagLabel::Class(case.class), None, None),
            Task::Survival => {
                let bin = discretize::assign_bin(case.time, cuts.as_ref().expect("survival cuts"));
                (
                    bin,
                    BagLabel::Survival(SurvivalLabel {
                        bin,
                        censored: case.censored,
                        time: case.time,
                    }),
                    Some(case.censored),
                    Some(case.time),
                )
            }
        };
        records.push(ManifestRecord {
            bag_id: case.bag_id.clone(),
            site_id: case.site_id,
            split,
            task: spec.task,
            label,
            censored,
            time,
            path: String::new(),
        });
        bags.push(FeatureBag {
            bag_id: case.bag_id,
            site_id: case.site_id,
            features: case.features,
            label: bag_label,
        });
    }

    let manifest = DatasetManifest {
        task: spec.task,
        records,
        cuts,
    };
    manifest.validate()?;
    Ok((bags, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Dataset, SplitKind};

    fn base_spec(task: Task) -> SynthSpec {
        SynthSpec {
            task,
            seed: 11,
            d_in: 16,
            sites: vec![
                SynthSite {
                    cases: 60,
                    class_proportions: Some(vec![0.7, 0.3]),
                },
                SynthSite {
                    cases: 40,
                    class_proportions: None,
                },
            ],
            n_classes: 2,
            censor_fraction: 0.4,
            survival_bins: 4,
            signal_scale: 1.0,
            noise_scale: 1.0,
            site_shift_scale: 0.5,
            bag_size: (4, 10),
            signal_fraction: 0.25,
            class_directions: None,
            split_fractions: (0.7, 0.15, 0.15),
        }
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let spec = base_spec(Task::Classification);
        let (bags_a, manifest_a) = generate_synthetic(&spec).unwrap();
        let (bags_b, manifest_b) = generate_synthetic(&spec).unwrap();
        assert_eq!(bags_a, bags_b);
        assert_eq!(manifest_a, manifest_b);

        let mut other = spec.clone();
        other.seed = 12;
        let (bags_c, _) = generate_synthetic(&other).unwrap();
        assert_ne!(bags_a[0].features, bags_c[0].features);
    }

    #[test]
    fn dataset_assembles_with_expected_shape() {
        let spec = base_spec(Task::Classification);
        let (bags, manifest) = generate_synthetic(&spec).unwrap();
        assert_eq!(bags.len(), 100);
        let dataset = Dataset::assemble(&manifest, bags).unwrap();
        assert_eq!(dataset.sites.len(), 2);
        assert_eq!(dataset.d_in, 16);
        assert_eq!(dataset.n_outputs, 2);
        for site in &dataset.sites {
            assert!(!site.train.is_empty());
            for bag in site.train.iter().chain(&site.val).chain(&site.test) {
                let m = bag.num_instances();
                assert!((4..=10).contains(&m));
            }
        }
    }

    #[test]
    fn censored_fraction_close_to_requested() {
        let mut spec = base_spec(Task::Survival);
        spec.sites = vec![SynthSite {
            cases: 1000,
            class_proportions: None,
        }];
        let (bags, _) = generate_synthetic(&spec).unwrap();
        let censored = bags
            .iter()
            .filter(|b| matches!(b.label, BagLabel::Survival(l) if l.censored))
            .count() as f64
            / bags.len() as f64;
        assert!(
            (censored - 0.4).abs() < 0.03,
            "censored fraction {censored}"
        );
    }

    #[test]
    fn site_offset_shifts_signal_means() {
        let mut spec = base_spec(Task::Classification);
        spec.noise_scale = 0.0;
        spec.site_shift_scale = 3.0;
        spec.signal_fraction = 1.0; // every instance carries the offset
        let (bags, _) = generate_synthetic(&spec).unwrap();

        let site_mean = |site: u32| -> Array1<f64> {
            let mut acc = Array1::<f64>::zeros(spec.d_in);
            let mut count = 0.0;
            for bag in bags.iter().filter(|b| b.site_id == site) {
                for row in bag.features_f64().rows() {
                    acc = acc + &row;
                    count += 1.0;
                }
            }
            acc / count
        };
        let gap = site_mean(0) - site_mean(1);
        let norm = gap.dot(&gap).sqrt();
        // Offsets are random unit vectors scaled by 3; their difference has
        // norm 3*sqrt(2) in expectation and cannot vanish.
        assert!(norm > 1.5, "offset gap {norm}");
    }

    #[test]
    fn zero_noise_bags_are_linearly_separable() {
        let mut spec = base_spec(Task::Classification);
        spec.noise_scale = 0.0;
        spec.site_shift_scale = 0.0;
        spec.signal_fraction = 0.0; // background-only rows are exactly zero
        // One signal instance per bag comes from forcing the fraction up.
        spec.signal_fraction = 0.1;
        spec.bag_size = (10, 10);
        let (bags, _) = generate_synthetic(&spec).unwrap();
        let dirs = class_directions(&spec);
        // Projecting the bag sum onto (dir0 - dir1) separates the classes.
        let sep = &dirs[0] - &dirs[1];
        let mut min_c0 = f64::INFINITY;
        let mut max_c1 = f64::NEG_INFINITY;
        for bag in &bags {
            let total = bag.features_f64().sum_axis(ndarray::Axis(0));
            let score = total.dot(&sep);
            match bag.label {
                BagLabel::Class(0) => min_c0 = min_c0.min(score),
                BagLabel::Class(1) => max_c1 = max_c1.max(score),
                _ => unreachable!(),
            }
        }
        assert!(
            min_c0 > max_c1,
            "classes overlap: min_c0 {min_c0}, max_c1 {max_c1}"
        );
    }

    #[test]
    fn survival_cuts_come_from_training_split() {
        let spec = base_spec(Task::Survival);
        let (_, manifest) = generate_synthetic(&spec).unwrap();
        let cuts = manifest.cuts.as_ref().unwrap();
        assert_eq!(cuts.len(), 3);
        assert!(cuts.windows(2).all(|w| w[0] < w[1]));

        let train_uncensored: Vec<f64> = manifest
            .records
            .iter()
            .filter(|r| r.split == SplitKind::Train && r.censored == Some(false))
            .map(|r| r.time.unwrap())
            .collect();
        let (expected, _) = discretize::discretize_survival(
            &train_uncensored,
            &vec![false; train_uncensored.len()],
            4,
        )
        .unwrap();
        assert_eq!(cuts, &expected);
    }

    #[test]
    fn higher_latent_risk_means_shorter_event_times() {
        // Check the generator's monotone risk-to-time link on uncensored
        // cases: early-bin cases should have larger feature-signal norms on
        // average than late-bin cases.
        let mut spec = base_spec(Task::Survival);
        spec.sites = vec![SynthSite {
            cases: 600,
            class_proportions: None,
        }];
        spec.censor_fraction = 0.0;
        spec.noise_scale = 0.0;
        spec.signal_fraction = 1.0;
        spec.site_shift_scale = 0.0;
        let (bags, _) = generate_synthetic(&spec).unwrap();
        let mut by_bin: std::collections::BTreeMap<usize, Vec<f64>> = Default::default();
        for bag in &bags {
            let BagLabel::Survival(label) = bag.label else {
                unreachable!()
            };
            let row = bag.features_f64();
            let norm = row.row(0).dot(&row.row(0)).sqrt();
            by_bin.entry(label.bin).or_default().push(norm);
        }
        let means: Vec<f64> = by_bin
            .values()
            .map(|v| v.iter().sum::<f64>() / v.len() as f64)
            .collect();
        assert_eq!(means.len(), 4);
        for w in means.windows(2) {
            assert!(w[0] > w[1], "signal norms not decreasing: {means:?}");
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = base_spec(Task::Classification);
        spec.sites[0].class_proportions = Some(vec![0.9, 0.3]);
        assert!(generate_synthetic(&spec).is_err());

        let mut spec = base_spec(Task::Classification);
        spec.bag_size = (0, 4);
        assert!(generate_synthetic(&spec).is_err());

        let mut spec = base_spec(Task::Survival);
        spec.censor_fraction = 1.4;
        assert!(generate_synthetic(&spec).is_err());
    }
}
