//! Discretization of continuous follow-up times into R hazard bins.
//!
//! Cut points are the R-1 evenly spaced quantiles (linear interpolation
//! between order statistics) of the event times of uncensored cases only.
//! Every case, censored or not, is then assigned bin r iff its time falls in
//! [t_r, t_{r+1}), with t_0 = 0 and t_R = infinity.

use super::DataError;

/// Linear-interpolation quantile of an ascending-sorted sample.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty() && (0.0..=1.0).contains(&q));
    let position = q * (sorted.len() - 1) as f64;
    let lower = position.floor() as usize;
    let upper = position.ceil() as usize;
    if lower == upper {
        sorted[lower]
    } else {
        let weight = position - lower as f64;
        sorted[lower] + weight * (sorted[upper] - sorted[lower])
    }
}

/// Bin index for `time` given strictly increasing cut points: the number of
/// cut points at or below `time` (half-open intervals, so a time exactly at
/// t_r lands in bin r).
pub fn assign_bin(time: f64, cuts: &[f64]) -> usize {
    cuts.iter().filter(|&&c| time >= c).count()
}

/// Compute cut points from uncensored event-time quantiles and assign every
/// case a bin.
///
/// The caller controls which cases participate in cut-point estimation by
/// what it passes here; reuse the returned cuts with [`assign_bin`] for
/// held-out cases.
pub fn discretize_survival(
    times: &[f64],
    censored: &[bool],
    r_bins: usize,
) -> Result<(Vec<f64>, Vec<usize>), DataError> {
    assert!(r_bins >= 2, "need at least two bins");
    assert_eq!(times.len(), censored.len());
    if let Some(&t) = times.iter().find(|&&t| !(t >= 0.0)) {
        return Err(DataError::NegativeTime(t));
    }

    let mut event_times: Vec<f64> = times
        .iter()
        .zip(censored)
        .filter(|(_, &c)| !c)
        .map(|(&t, _)| t)
        .collect();
    if event_times.len() < r_bins {
        return Err(DataError::TooFewUncensored {
            need: r_bins,
            got: event_times.len(),
        });
    }
    event_times.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let cuts: Vec<f64> = (1..r_bins)
        .map(|i| quantile_sorted(&event_times, i as f64 / r_bins as f64))
        .collect();
    if !cuts.windows(2).all(|w| w[0] < w[1]) {
        return Err(DataError::NonIncreasingCuts(cuts));
    }

    let bins = times.iter().map(|&t| assign_bin(t, &cuts)).collect();
    Ok((cuts, bins))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quartile_cuts_match_linear_interpolation() {
        let times = [10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0];
        let censored = [false; 8];
        let (cuts, bins) = discretize_survival(&times, &censored, 4).unwrap();
        assert_eq!(cuts, vec![27.5, 45.0, 62.5]);
        // time 30 lands in bin 1.
        assert_eq!(bins[2], 1);
        assert_eq!(bins, vec![0, 0, 1, 1, 2, 2, 3, 3]);
    }

    #[test]
    fn censored_cases_are_binned_but_do_not_move_cuts() {
        let times = [10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 5.0, 75.0];
        let mut censored = [false; 10];
        censored[8] = true;
        censored[9] = true;
        let (cuts, bins) = discretize_survival(&times, &censored, 4).unwrap();
        assert_eq!(cuts, vec![27.5, 45.0, 62.5]);
        assert_eq!(bins[8], 0);
        assert_eq!(bins[9], 3);
    }

    #[test]
    fn boundary_time_goes_to_upper_bin() {
        let cuts = [27.5, 45.0, 62.5];
        assert_eq!(assign_bin(27.5, &cuts), 1);
        assert_eq!(assign_bin(45.0, &cuts), 2);
        assert_eq!(assign_bin(44.999, &cuts), 1);
        assert_eq!(assign_bin(0.0, &cuts), 0);
        assert_eq!(assign_bin(1e12, &cuts), 3);
    }

    #[test]
    fn identical_times_are_rejected() {
        let times = [5.0; 8];
        let censored = [false; 8];
        assert!(matches!(
            discretize_survival(&times, &censored, 4),
            Err(DataError::NonIncreasingCuts(_))
        ));
    }

    #[test]
    fn too_few_uncensored_is_an_error() {
        let times = [1.0, 2.0, 3.0, 4.0];
        let censored = [false, false, true, true];
        assert!(matches!(
            discretize_survival(&times, &censored, 4),
            Err(DataError::TooFewUncensored { need: 4, got: 2 })
        ));
    }

    #[test]
    fn negative_time_is_an_error() {
        assert!(matches!(
            discretize_survival(&[1.0, -0.5], &[false, false], 2),
            Err(DataError::NegativeTime(_))
        ));
    }

    #[test]
    fn training_bins_are_balanced_within_one() {
        // Quartile cuts put equal numbers of uncensored cases in each bin.
        let times: Vec<f64> = (0..101).map(|i| (i * i) as f64 / 7.0).collect();
        let censored = vec![false; 101];
        let (_, bins) = discretize_survival(&times, &censored, 4).unwrap();
        let mut counts = [0usize; 4];
        for &b in &bins {
            counts[b] += 1;
        }
        let min = *counts.iter().min().unwrap();
        let max = *counts.iter().max().unwrap();
        assert!(max - min <= 1, "counts {counts:?}");
    }
}
