//! Survival statistics: Harrell's concordance index, the two-sample
//! log-rank test, median risk stratification, and Kaplan-Meier curves.

use serde::{Deserialize, Serialize};

use super::special::chi_square_sf;
use super::MetricsError;

/// Kaplan-Meier product-limit estimate as a step function. One entry per
/// distinct observed time; the survival value only drops at event times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmCurve {
    pub times: Vec<f64>,
    pub survival: Vec<f64>,
    pub at_risk: Vec<usize>,
    pub events: Vec<usize>,
}

/// Test-set survival evaluation. The log-rank fields are absent when median
/// stratification is degenerate (e.g. a collapsed model scoring every
/// patient identically).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalReport {
    pub c_index: f64,
    pub log_rank_statistic: Option<f64>,
    pub log_rank_p: Option<f64>,
    pub km_high_risk: Option<KmCurve>,
    pub km_low_risk: Option<KmCurve>,
}

fn check_lengths(
    what: &'static str,
    expected: usize,
    got: usize,
) -> Result<(), MetricsError> {
    if expected != got {
        return Err(MetricsError::LengthMismatch {
            what,
            expected,
            got,
        });
    }
    Ok(())
}

/// Prefix-sum tree over compressed risk ranks.
struct Fenwick {
    counts: Vec<usize>,
}

impl Fenwick {
    fn new(size: usize) -> Self {
        Self {
            counts: vec![0; size + 1],
        }
    }

    fn add(&mut self, mut rank: usize) {
        rank += 1;
        while rank < self.counts.len() {
            self.counts[rank] += 1;
            rank += rank & rank.wrapping_neg();
        }
    }

    /// Number of inserted entries with rank strictly below `rank`.
    fn count_below(&self, rank: usize) -> usize {
        let mut sum = 0;
        let mut i = rank; // prefix over ranks 0..rank-1, stored 1-based
        while i > 0 {
            sum += self.counts[i];
            i -= i & i.wrapping_neg();
        }
        sum
    }
}

/// Harrell's concordance index.
///
/// A pair (i, j) is comparable iff t_i < t_j and subject i had an event;
/// it is concordant when risk_i > risk_j, with risk ties counted at half
/// weight. Computed by a descending time sweep over a rank tree rather than
/// pair enumeration.
pub fn c_index(risks: &[f64], times: &[f64], censored: &[bool]) -> Result<f64, MetricsError> {
    let n = risks.len();
    check_lengths("times", n, times.len())?;
    check_lengths("censorship", n, censored.len())?;
    if risks.iter().any(|r| !r.is_finite()) || times.iter().any(|t| !t.is_finite()) {
        return Err(MetricsError::NonFinite("risks or times"));
    }

    // Compress risks to dense ranks.
    let mut sorted_risks: Vec<f64> = risks.to_vec();
    sorted_risks.sort_by(|a, b| a.partial_cmp(b).unwrap());
    sorted_risks.dedup();
    let rank_of = |r: f64| sorted_risks.partition_point(|&x| x < r);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| times[b].partial_cmp(&times[a]).unwrap());

    let mut tree = Fenwick::new(sorted_risks.len());
    let mut inserted = 0usize;
    let mut concordant = 0.0_f64;
    let mut comparable = 0usize;

    let mut i = 0;
    while i < n {
        // Subjects tied at this time are mutually incomparable; score the
        // whole group against strictly later subjects before inserting it.
        let mut j = i;
        while j < n && times[order[j]] == times[order[i]] {
            j += 1;
        }
        for &idx in &order[i..j] {
            if censored[idx] {
                continue;
            }
            let rank = rank_of(risks[idx]);
            let below = tree.count_below(rank);
            let below_or_eq = tree.count_below(rank + 1);
            let equal = below_or_eq - below;
            comparable += inserted;
            concordant += below as f64 + 0.5 * equal as f64;
        }
        for &idx in &order[i..j] {
            tree.add(rank_of(risks[idx]));
        }
        inserted += j - i;
        i = j;
    }

    if comparable == 0 {
        return Err(MetricsError::NoComparablePairs);
    }
    Ok(concordant / comparable as f64)
}

/// Two-sample log-rank test with one degree of freedom.
///
/// Returns `(statistic, p)` where the statistic is
/// (sum over event times of O1 - E1)^2 / (sum of hypergeometric variances)
/// and p comes from the chi-square survival function.
pub fn log_rank(
    times: &[f64],
    censored: &[bool],
    group: &[bool],
) -> Result<(f64, f64), MetricsError> {
    let n = times.len();
    check_lengths("censorship", n, censored.len())?;
    check_lengths("group", n, group.len())?;
    let in_group1 = group.iter().filter(|&&g| g).count();
    if in_group1 == 0 || in_group1 == n {
        return Err(MetricsError::EmptyGroup);
    }
    if censored.iter().all(|&c| c) {
        return Err(MetricsError::NoEvents);
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| times[a].partial_cmp(&times[b]).unwrap());

    let mut at_risk = n;
    let mut at_risk_1 = in_group1;
    let mut observed_minus_expected = 0.0;
    let mut variance = 0.0;

    let mut i = 0;
    while i < n {
        let mut j = i;
        let mut deaths = 0usize;
        let mut deaths_1 = 0usize;
        let mut leaving_1 = 0usize;
        while j < n && times[order[j]] == times[order[i]] {
            let idx = order[j];
            if !censored[idx] {
                deaths += 1;
                if group[idx] {
                    deaths_1 += 1;
                }
            }
            if group[idx] {
                leaving_1 += 1;
            }
            j += 1;
        }
        if deaths > 0 {
            let nf = at_risk as f64;
            let n1 = at_risk_1 as f64;
            let d = deaths as f64;
            observed_minus_expected += deaths_1 as f64 - d * n1 / nf;
            if at_risk > 1 {
                variance += d * (n1 / nf) * (1.0 - n1 / nf) * (nf - d) / (nf - 1.0);
            }
        }
        at_risk -= j - i;
        at_risk_1 -= leaving_1;
        i = j;
    }

    let statistic = if variance > 0.0 {
        observed_minus_expected * observed_minus_expected / variance
    } else {
        0.0
    };
    Ok((statistic, chi_square_sf(statistic, 1.0)))
}

/// Split subjects at the sample median of their risk scores. High risk means
/// strictly above the median; ties at the median go to the low-risk group.
///
/// Errors when either group would be empty (in particular when all risks are
/// equal), since a one-sided stratification carries no information.
pub fn stratify_by_median(risks: &[f64]) -> Result<Vec<bool>, MetricsError> {
    if risks.len() < 2 {
        return Err(MetricsError::TooFewSamples(2));
    }
    if risks.iter().any(|r| !r.is_finite()) {
        return Err(MetricsError::NonFinite("risks"));
    }
    let mut sorted = risks.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let groups: Vec<bool> = risks.iter().map(|&r| r > median).collect();
    let high = groups.iter().filter(|&&g| g).count();
    if high == 0 || high == n {
        return Err(MetricsError::DegenerateStratification);
    }
    Ok(groups)
}

/// Kaplan-Meier product-limit estimator.
pub fn km_curve(times: &[f64], censored: &[bool]) -> Result<KmCurve, MetricsError> {
    let n = times.len();
    check_lengths("censorship", n, censored.len())?;
    if n == 0 {
        return Err(MetricsError::TooFewSamples(1));
    }
    if times.iter().any(|t| !t.is_finite()) {
        return Err(MetricsError::NonFinite("times"));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| times[a].partial_cmp(&times[b]).unwrap());

    let mut curve = KmCurve {
        times: Vec::new(),
        survival: Vec::new(),
        at_risk: Vec::new(),
        events: Vec::new(),
    };
    let mut survival = 1.0;
    let mut i = 0;
    while i < n {
        let at_risk = n - i;
        let t = times[order[i]];
        let mut j = i;
        let mut deaths = 0usize;
        while j < n && times[order[j]] == t {
            if !censored[order[j]] {
                deaths += 1;
            }
            j += 1;
        }
        if deaths > 0 {
            survival *= 1.0 - deaths as f64 / at_risk as f64;
        }
        curve.times.push(t);
        curve.survival.push(survival);
        curve.at_risk.push(at_risk);
        curve.events.push(deaths);
        i = j;
    }
    Ok(curve)
}

/// Evaluate a risk model on a test cohort: concordance plus, when the median
/// split is usable, the log-rank comparison and per-group KM curves.
pub fn survival_report(
    risks: &[f64],
    times: &[f64],
    censored: &[bool],
) -> Result<SurvivalReport, MetricsError> {
    let c = c_index(risks, times, censored)?;
    let mut report = SurvivalReport {
        c_index: c,
        log_rank_statistic: None,
        log_rank_p: None,
        km_high_risk: None,
        km_low_risk: None,
    };

    let groups = match stratify_by_median(risks) {
        Ok(g) => g,
        Err(err) => {
            log::warn!("risk stratification unavailable: {err}");
            return Ok(report);
        }
    };
    match log_rank(times, censored, &groups) {
        Ok((statistic, p)) => {
            report.log_rank_statistic = Some(statistic);
            report.log_rank_p = Some(p);
        }
        Err(err) => log::warn!("log-rank test unavailable: {err}"),
    }

    let select = |keep_high: bool| -> (Vec<f64>, Vec<bool>) {
        let mut t = Vec::new();
        let mut c = Vec::new();
        for i in 0..risks.len() {
            if groups[i] == keep_high {
                t.push(times[i]);
                c.push(censored[i]);
            }
        }
        (t, c)
    };
    let (high_t, high_c) = select(true);
    let (low_t, low_c) = select(false);
    report.km_high_risk = km_curve(&high_t, &high_c).ok();
    report.km_low_risk = km_curve(&low_t, &low_c).ok();
    Ok(report)
}
