//! Attention-score export: per instance, the raw softmax weight plus a
//! within-bag percentile (fraction of scores strictly below, ties sharing
//! the average of their positions), normalized to [0, 1].

use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context};

use fedbag_core::data::{load_dataset, FeatureBag, SplitKind};
use fedbag_core::federation::checkpoint::load_checkpoint;
use fedbag_core::model::{forward_bag, ForwardMode, ModelWeights};

/// Percentile-normalize one bag's attention scores.
pub fn percentile_normalize(scores: &[f64]) -> Vec<f64> {
    let m = scores.len();
    if m <= 1 {
        return vec![0.5; m];
    }
    scores
        .iter()
        .map(|&s| {
            let below = scores.iter().filter(|&&x| x < s).count() as f64;
            let ties = scores.iter().filter(|&&x| x == s).count() as f64;
            (below + (ties - 1.0) / 2.0) / (m as f64 - 1.0)
        })
        .collect()
}

fn export_bag(
    weights: &ModelWeights,
    bag: &FeatureBag,
    split: SplitKind,
    out: &mut impl Write,
) -> anyhow::Result<()> {
    let features = bag.features_f64();
    let trace = forward_bag(weights, &features.view(), ForwardMode::Eval)?;
    let raw: Vec<f64> = trace.attention.to_vec();
    let normalized = percentile_normalize(&raw);
    for (i, (a, p)) in raw.iter().zip(&normalized).enumerate() {
        writeln!(
            out,
            "{},{},{},{},{}",
            bag.bag_id,
            split.as_str(),
            i,
            a,
            p
        )?;
    }
    Ok(())
}

/// Evaluate a trained checkpoint over every bag in a dataset and write one
/// CSV row per instance.
pub fn export_attention(
    checkpoint: &Path,
    manifest: &Path,
    out_path: &Path,
) -> anyhow::Result<usize> {
    let (weights, _) = load_checkpoint(checkpoint)
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let dataset = load_dataset(manifest)
        .with_context(|| format!("loading dataset {}", manifest.display()))?;
    if dataset.d_in != weights.dims.d_in {
        bail!(
            "checkpoint expects {} features, dataset has {}",
            weights.dims.d_in,
            dataset.d_in
        );
    }

    let file = std::fs::File::create(out_path)
        .with_context(|| format!("creating {}", out_path.display()))?;
    let mut out = std::io::BufWriter::new(file);
    writeln!(out, "bag_id,split,instance,attention,percentile")?;

    let mut bags = 0usize;
    for site in &dataset.sites {
        for (split, group) in [
            (SplitKind::Train, &site.train),
            (SplitKind::Val, &site.val),
            (SplitKind::Test, &site.test),
        ] {
            for bag in group {
                export_bag(&weights, bag, split, &mut out)?;
                bags += 1;
            }
        }
    }
    if bags == 0 {
        bail!("no bags found in {}", manifest.display());
    }
    out.flush()?;
    Ok(bags)
}
