//! Subsampling inference for statistics whose limit may have infinite
//! variance.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{percentile_sorted, stream_rng};
use crate::propensity::ObservationSet;

/// Default number of subsamples.
pub const DEFAULT_REPLICATES: usize = 2000;

/// Fewest successful replicates accepted by [`interval_from_subsamples`].
pub const MIN_REPLICATES: usize = 20;

/// `floor(n / ln n)`.
pub fn subsample_size(n: usize) -> Result<usize> {
    if n < 3 {
        return Err(Error::TooSmall(n));
    }
    let nf = n as f64;
    Ok((nf / nf.ln()).floor() as usize)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubsampleDistribution {
    pub statistic: String,
    /// One entry per replicate, `None` where the statistic failed.
    pub replicates: Vec<Option<f64>>,
    pub n: usize,
    pub n_b: usize,
    pub b: usize,
    pub seed: u64,
    pub replacement: bool,
    /// Message of the first failure, if any.
    pub first_failure: Option<String>,
}

impl SubsampleDistribution {
    pub fn successes(&self) -> Vec<f64> {
        self.replicates.iter().flatten().copied().collect()
    }

    pub fn failures(&self) -> usize {
        self.replicates.iter().filter(|r| r.is_none()).count()
    }
}

/// Row indices of subsample `r`; a pure function of `(seed, r)`.
pub fn subsample_indices(n: usize, n_b: usize, seed: u64, replicate: usize, replacement: bool) -> Vec<usize> {
    let mut rng = stream_rng(seed, replicate as u64);
    if replacement {
        (0..n_b).map(|_| rng.random_range(0..n)).collect()
    } else {
        let mut idx = sample_indices(&mut rng, n, n_b).into_vec();
        idx.sort_unstable();
        idx
    }
}

/// Recomputes `statistic` on `b` subsamples of size `n_b`. Without
/// replacement by default; `replacement = true` gives the m-out-of-n
/// bootstrap. Replicates run in parallel, each on its own RNG stream.
pub fn subsample_statistic<F>(
    obs: &ObservationSet,
    name: &str,
    statistic: F,
    b: usize,
    n_b: usize,
    seed: u64,
    replacement: bool,
) -> Result<SubsampleDistribution>
where
    F: Fn(&ObservationSet) -> Result<f64> + Sync,
{
    let n = obs.len();
    if b == 0 {
        return Err(Error::InsufficientReplicates { got: 0, needed: 1 });
    }
    if n_b == 0 || (!replacement && n_b >= n) {
        return Err(Error::param("n_b", format!("{n_b} must lie in [1, n) for n = {n}")));
    }
    let results: Vec<Result<f64>> = (0..b)
        .into_par_iter()
        .map(|r| {
            let idx = subsample_indices(n, n_b, seed, r, replacement);
            statistic(&obs.subset(&idx))
        })
        .collect();
    let first_failure = results.iter().find_map(|r| r.as_ref().err().map(|e| e.to_string()));
    Ok(SubsampleDistribution {
        statistic: name.to_string(),
        replicates: results.into_iter().map(|r| r.ok()).collect(),
        n,
        n_b,
        b,
        seed,
        replacement,
        first_failure,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum IntervalRule {
    /// Plain percentiles of the replicate values.
    #[default]
    Percentile,
    /// Replicate deviations rescaled by `(n_b / n)^rate` around the estimate.
    RateRecentered,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
    pub level: f64,
    pub rule: IntervalRule,
    pub replicates_used: usize,
}

/// Interval at `level` from a subsample distribution. With
/// `rate_exponent = None` the percentile rule is used; with `Some(r)`
/// (typically `1 - 1/gamma_hat`) the replicate deviations `Q - estimate` are
/// shrunk by `(n_b/n)^r` and reflected around `point_estimate`.
/// Percentiles use linear interpolation between order statistics.
pub fn interval_from_subsamples(
    dist: &SubsampleDistribution,
    point_estimate: f64,
    level: f64,
    rate_exponent: Option<f64>,
) -> Result<Interval> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::param("level", format!("{level} is not in (0, 1)")));
    }
    let mut values = dist.successes();
    if values.len() < MIN_REPLICATES {
        return Err(Error::InsufficientReplicates {
            got: values.len(),
            needed: MIN_REPLICATES,
        });
    }
    values.sort_by(f64::total_cmp);
    let q_lo = percentile_sorted(&values, (1.0 - level) / 2.0);
    let q_hi = percentile_sorted(&values, (1.0 + level) / 2.0);
    let (lo, hi, rule) = match rate_exponent {
        None => (q_lo, q_hi, IntervalRule::Percentile),
        Some(r) => {
            if !r.is_finite() {
                return Err(Error::param("rate_exponent", "must be finite"));
            }
            let shrink = (dist.n_b as f64 / dist.n as f64).powf(r);
            (
                point_estimate - shrink * (q_hi - point_estimate),
                point_estimate - shrink * (q_lo - point_estimate),
                IntervalRule::RateRecentered,
            )
        }
    };
    Ok(Interval {
        lo,
        hi,
        level,
        rule,
        replicates_used: values.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(values: Vec<f64>) -> SubsampleDistribution {
        let b = values.len();
        SubsampleDistribution {
            statistic: "x".into(),
            replicates: values.into_iter().map(Some).collect(),
            n: 1000,
            n_b: 144,
            b,
            seed: 0,
            replacement: false,
            first_failure: None,
        }
    }

    #[test]
    fn subsample_sizes() {
        assert_eq!(subsample_size(1342).unwrap(), 186);
        assert_eq!(subsample_size(1000).unwrap(), 144);
        assert_eq!(subsample_size(3).unwrap(), 2);
        assert!(matches!(subsample_size(2), Err(Error::TooSmall(2))));
    }

    #[test]
    fn percentile_interval_conventions() {
        let d = dist((1..=100).map(f64::from).collect());
        let i = interval_from_subsamples(&d, 50.0, 0.9, None).unwrap();
        assert!((i.lo - 5.95).abs() < 1e-12 && (i.hi - 95.05).abs() < 1e-12);
        let j = interval_from_subsamples(&d, 50.0, 0.5, None).unwrap();
        assert!(j.lo > i.lo && j.hi < i.hi);
        let c = dist(vec![2.5; 30]);
        let k = interval_from_subsamples(&c, 2.5, 0.95, Some(0.4)).unwrap();
        assert_eq!((k.lo, k.hi), (2.5, 2.5));
        assert!(matches!(
            interval_from_subsamples(&dist(vec![1.0; 19]), 1.0, 0.9, None),
            Err(Error::InsufficientReplicates { got: 19, .. })
        ));
    }

    #[test]
    fn rate_recentered_reflects() {
        let d = dist((1..=100).map(f64::from).collect());
        let i = interval_from_subsamples(&d, 50.0, 0.9, Some(0.0)).unwrap();
        assert!((i.lo - (50.0 - 45.05)).abs() < 1e-12);
        assert!((i.hi - (50.0 + 44.05)).abs() < 1e-12);
    }

    #[test]
    fn indices_without_replacement_are_distinct() {
        let idx = subsample_indices(50, 20, 9, 3, false);
        let mut u = idx.clone();
        u.dedup();
        assert_eq!(u.len(), 20);
        assert_eq!(idx, subsample_indices(50, 20, 9, 3, false));
    }
}
