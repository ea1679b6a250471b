//! Check loss and the exact weighted-quantile minimizer.
//!
//! Every estimator in the crate reduces to minimizing
//! `t -> sum_i w_i * rho_tau(y_i - t)` over the real line. The minimizer is a
//! support point and is found by a sort plus cumulative-weight scan.

use crate::error::{check_probability, Error, Result};

/// Probability level of the check loss, validated to lie in (0, 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckLossParams {
    tau: f64,
}

impl CheckLossParams {
    pub fn new(tau: f64) -> Result<Self> {
        check_probability("tau", tau)?;
        Ok(Self { tau })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }
}

/// Outcomes paired with nonnegative weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedSample {
    values: Vec<f64>,
    weights: Vec<f64>,
}

impl WeightedSample {
    pub fn new(values: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if values.len() != weights.len() {
            return Err(Error::param(
                "weights",
                format!("{} weights for {} values", weights.len(), values.len()),
            ));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::param("values", format!("non-finite value at index {i}")));
        }
        if let Some(i) = weights.iter().position(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::param(
                "weights",
                format!("weight {} at index {i} is not a finite nonnegative number", weights[i]),
            ));
        }
        Ok(Self { values, weights })
    }

    /// Unit weights.
    pub fn unweighted(values: Vec<f64>) -> Result<Self> {
        let weights = vec![1.0; values.len()];
        Self::new(values, weights)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// `rho_tau(y) = y * (tau - 1(y <= 0))`.
pub fn check_loss(y: f64, params: &CheckLossParams) -> f64 {
    let tau = params.tau;
    if y <= 0.0 {
        y * (tau - 1.0)
    } else {
        y * tau
    }
}

fn rho(y: f64, tau: f64) -> f64 {
    if y <= 0.0 {
        y * (tau - 1.0)
    } else {
        y * tau
    }
}

/// Closed form of `int_0^v (1(u <= s) - 1(u <= 0)) ds`.
pub(crate) fn indicator_integral(u: f64, v: f64) -> f64 {
    if v >= 0.0 {
        if u > 0.0 {
            (v - u).max(0.0)
        } else {
            0.0
        }
    } else if u <= 0.0 {
        (u - v).max(0.0)
    } else {
        0.0
    }
}

/// `rho_tau(u - v) - rho_tau(u)` evaluated through the linear-plus-integral
/// decomposition, which avoids cancellation when `v` is small.
pub(crate) fn check_increment(u: f64, v: f64, tau: f64) -> f64 {
    let slope = if u <= 0.0 { tau - 1.0 } else { tau };
    -v * slope + indicator_integral(u, v)
}

/// Difference between the two sides of the check-loss increment identity
/// `rho(u - v) - rho(u) = -v (tau - 1(u <= 0)) + int_0^v (1(u <= s) - 1(u <= 0)) ds`.
/// Zero up to floating round-off.
pub fn check_identity_residual(u: f64, v: f64, tau: f64) -> f64 {
    let lhs = rho(u - v, tau) - rho(u, tau);
    lhs - check_increment(u, v, tau)
}

/// `sum_i w_i rho_tau(y_i - t)`.
pub fn objective(sample: &WeightedSample, t: f64, params: &CheckLossParams) -> f64 {
    sample
        .values
        .iter()
        .zip(&sample.weights)
        .map(|(&y, &w)| if w > 0.0 { w * rho(y - t, params.tau) } else { 0.0 })
        .sum()
}

/// Minimizer of the weighted check-loss objective with solver metadata.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedQuantile {
    pub value: f64,
    /// Sum of the positive weights.
    pub total_weight: f64,
    /// Number of distinct positive-weight support points.
    pub support_size: usize,
    /// The minimizer is the largest support point.
    pub at_upper_support: bool,
    /// The cumulative weight never reached `tau * W` because of rounding and
    /// the scan fell through to the largest point.
    pub rounding_fallback: bool,
}

/// Merged (value, weight) support of the positive-weight observations,
/// sorted ascending.
fn merged_support(sample: &WeightedSample) -> Vec<(f64, f64)> {
    let mut pts: Vec<(f64, f64)> = sample
        .values
        .iter()
        .zip(&sample.weights)
        .filter(|(_, &w)| w > 0.0)
        .map(|(&y, &w)| (y, w))
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut merged: Vec<(f64, f64)> = Vec::with_capacity(pts.len());
    for (y, w) in pts {
        match merged.last_mut() {
            Some(last) if last.0 == y => last.1 += w,
            _ => merged.push((y, w)),
        }
    }
    merged
}

/// Leftmost minimizer of [`objective`] together with support metadata.
pub fn weighted_quantile_detailed(sample: &WeightedSample, params: &CheckLossParams) -> Result<WeightedQuantile> {
    let support = merged_support(sample);
    if support.is_empty() {
        return Err(Error::EmptyEffectiveSample(
            "no observation carries positive weight".into(),
        ));
    }
    let total: f64 = support.iter().map(|p| p.1).sum();
    let target = params.tau * total;
    let mut cumulative = 0.0;
    for (j, &(y, w)) in support.iter().enumerate() {
        cumulative += w;
        if cumulative >= target {
            return Ok(WeightedQuantile {
                value: y,
                total_weight: total,
                support_size: support.len(),
                at_upper_support: j + 1 == support.len(),
                rounding_fallback: false,
            });
        }
    }
    let last = support[support.len() - 1].0;
    Ok(WeightedQuantile {
        value: last,
        total_weight: total,
        support_size: support.len(),
        at_upper_support: true,
        rounding_fallback: true,
    })
}

/// Leftmost minimizer of `t -> sum_i w_i rho_tau(y_i - t)`.
pub fn weighted_quantile(sample: &WeightedSample, params: &CheckLossParams) -> Result<f64> {
    weighted_quantile_detailed(sample, params).map(|q| q.value)
}

/// Rescaled local objective
/// `(n / h^2) [X(tau, q - u h / n) - X(tau, q)]` on a grid of `u`.
pub fn objective_process(
    sample: &WeightedSample,
    tau: f64,
    q_center: f64,
    u_grid: &[f64],
    h_n: f64,
    n: usize,
) -> Result<Vec<f64>> {
    check_probability("tau", tau)?;
    if !(h_n > 0.0 && h_n.is_finite()) {
        return Err(Error::param("h_n", format!("{h_n} is not positive")));
    }
    if n == 0 {
        return Err(Error::param("n", "must be at least 1"));
    }
    let nf = n as f64;
    let scale = nf / (h_n * h_n);
    Ok(u_grid
        .iter()
        .map(|&u| {
            // y - (q - u h / n) = (y - q) - v with v = -u h / n
            let v = -u * h_n / nf;
            let total: f64 = sample
                .values
                .iter()
                .zip(&sample.weights)
                .filter(|(_, &w)| w > 0.0)
                .map(|(&y, &w)| w * check_increment(y - q_center, v, tau))
                .sum();
            scale * total
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(tau: f64) -> CheckLossParams {
        CheckLossParams::new(tau).unwrap()
    }

    #[test]
    fn tau_is_validated() {
        assert!(CheckLossParams::new(0.0).is_err());
        assert!(CheckLossParams::new(1.0).is_err());
        assert!(CheckLossParams::new(f64::NAN).is_err());
    }

    #[test]
    fn check_loss_values() {
        assert_eq!(check_loss(0.0, &p(0.9)), 0.0);
        assert!((check_loss(1.0, &p(0.9)) - 0.9).abs() < 1e-15);
        assert!((check_loss(-1.0, &p(0.9)) - 0.1).abs() < 1e-15);
        assert_eq!(check_loss(2.0, &p(0.5)), 1.0);
    }

    #[test]
    fn identity_examples() {
        let lhs = rho(1.0 - 2.0, 0.3) - rho(1.0, 0.3);
        assert!((lhs - 0.4).abs() < 1e-15);
        assert!(check_identity_residual(1.0, 2.0, 0.3).abs() < 1e-15);
        assert_eq!(check_identity_residual(0.0, 0.0, 0.42), 0.0);
        assert!(check_identity_residual(-0.5, -1.0, 0.7).abs() < 1e-15);
    }

    #[test]
    fn objective_examples() {
        let s = WeightedSample::new(vec![1.0, 2.0, 3.0], vec![1.0, 1.0, 1.0]).unwrap();
        assert!((objective(&s, 2.0, &p(0.5)) - 1.0).abs() < 1e-15);
        let s = WeightedSample::new(vec![5.0], vec![0.0]).unwrap();
        assert_eq!(objective(&s, 1.3, &p(0.5)), 0.0);
        let s = WeightedSample::new(vec![1.0, 2.0, 3.0], vec![3.0, 1.0, 1.0]).unwrap();
        assert!((objective(&s, 1.0, &p(0.5)) - 1.5).abs() < 1e-15);
    }

    #[test]
    fn quantile_examples() {
        let s = WeightedSample::new(vec![1.0, 2.0, 3.0], vec![1.0, 1.0, 1.0]).unwrap();
        assert_eq!(weighted_quantile(&s, &p(0.5)).unwrap(), 2.0);
        let s = WeightedSample::new(vec![1.0, 2.0, 3.0], vec![3.0, 1.0, 1.0]).unwrap();
        assert_eq!(weighted_quantile(&s, &p(0.5)).unwrap(), 1.0);
        let s = WeightedSample::new(vec![0.0, 1.0], vec![1.0, 1.0]).unwrap();
        assert_eq!(weighted_quantile(&s, &p(0.5)).unwrap(), 0.0);
    }

    #[test]
    fn ties_are_merged_and_zero_weights_dropped() {
        let s = WeightedSample::new(vec![2.0, 1.0, 2.0, 9.0], vec![1.0, 1.0, 1.0, 0.0]).unwrap();
        let q = weighted_quantile_detailed(&s, &p(0.5)).unwrap();
        assert_eq!(q.value, 2.0);
        assert_eq!(q.support_size, 2);
        assert!(q.at_upper_support);
    }

    #[test]
    fn empty_sample_is_an_error() {
        let s = WeightedSample::new(vec![1.0, 2.0], vec![0.0, 0.0]).unwrap();
        assert!(matches!(
            weighted_quantile(&s, &p(0.5)),
            Err(Error::EmptyEffectiveSample(_))
        ));
        let s = WeightedSample::new(vec![], vec![]).unwrap();
        assert!(weighted_quantile(&s, &p(0.5)).is_err());
    }

    #[test]
    fn construction_rejects_bad_input() {
        assert!(WeightedSample::new(vec![1.0], vec![]).is_err());
        assert!(WeightedSample::new(vec![1.0], vec![-1.0]).is_err());
        assert!(WeightedSample::new(vec![f64::NAN], vec![1.0]).is_err());
    }

    #[test]
    fn objective_process_examples() {
        let s = WeightedSample::new(vec![1.0], vec![1.0]).unwrap();
        let z = objective_process(&s, 0.5, 1.0, &[0.0, 1.0], 1.0, 1).unwrap();
        assert_eq!(z[0], 0.0);
        assert!((z[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn objective_process_is_convex_in_u() {
        let s = WeightedSample::new(vec![0.3, -1.2, 2.2, 0.9, 0.0, 1.7], vec![1.0, 2.5, 0.3, 4.0, 1.1, 0.7]).unwrap();
        let grid: Vec<f64> = (-40..=40).map(|i| f64::from(i) * 0.25).collect();
        let z = objective_process(&s, 0.3, 0.8, &grid, 3.0, 6).unwrap();
        for w in z.windows(3) {
            assert!(w[1] <= 0.5 * (w[0] + w[2]) + 1e-12);
        }
    }
}
