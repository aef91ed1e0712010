//! Stratified train/val/test allocation.
//!
//! Cases are grouped per (site, stratum), shuffled by a named stream, and
//! allocated by largest remainder, so every group lands within one case of
//! its target fractions. The unit of splitting is the patient: callers pass
//! one case per patient and apply the returned split to all of that
//! patient's bags.

use std::collections::BTreeMap;

use super::{DataError, SplitKind};
use crate::rng::derive_rng;
use rand::seq::SliceRandom;

/// One patient to allocate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitCase {
    pub patient_id: String,
    pub site_id: u32,
    /// Opaque stratum key, e.g. `"class=1"` or `"bin=2,c=0"`.
    pub stratum: String,
}

/// Assign each case to a split. Returns assignments in input order.
pub fn stratified_split(
    cases: &[SplitCase],
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<Vec<SplitKind>, DataError> {
    let (f_train, f_val, f_test) = fractions;
    let sum = f_train + f_val + f_test;
    if !(f_train >= 0.0 && f_val >= 0.0 && f_test >= 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(DataError::InvalidFractions(fractions));
    }

    {
        let mut seen = std::collections::HashSet::new();
        for case in cases {
            if !seen.insert(case.patient_id.as_str()) {
                return Err(DataError::DuplicatePatient(case.patient_id.clone()));
            }
        }
    }

    let mut groups: BTreeMap<(u32, &str), Vec<usize>> = BTreeMap::new();
    for (i, case) in cases.iter().enumerate() {
        groups
            .entry((case.site_id, case.stratum.as_str()))
            .or_default()
            .push(i);
    }
    for (&(site, stratum), members) in &groups {
        if members.is_empty() {
            log::warn!("empty stratum {stratum:?} at site {site}");
        }
    }

    let mut assignments = vec![SplitKind::Train; cases.len()];
    for ((site, stratum), mut members) in groups {
        let mut rng = derive_rng(
            seed,
            &["split", &format!("site={site}"), &format!("stratum={stratum}")],
        );
        members.shuffle(&mut rng);

        let counts = largest_remainder(members.len(), [f_train, f_val, f_test]);
        let mut cursor = 0;
        for (split, count) in SplitKind::ALL.into_iter().zip(counts) {
            for &idx in &members[cursor..cursor + count] {
                assignments[idx] = split;
            }
            cursor += count;
        }
    }
    Ok(assignments)
}

/// Integer allocation of `n` items to fractions summing to 1: floor of each
/// target, remainders distributed by largest fractional part (earlier split
/// wins ties).
fn largest_remainder(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let targets: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: [usize; 3] = [
        targets[0].floor() as usize,
        targets[1].floor() as usize,
        targets[2].floor() as usize,
    ];
    let mut leftover = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = targets[a] - targets[a].floor();
        let rb = targets[b] - targets[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in &order {
        if leftover == 0 {
            break;
        }
        counts[i] += 1;
        leftover -= 1;
    }
    counts
}
