//! Truncated IPW quantile estimators for each arm, the quantile treatment
//! effect and the truncation sweep.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_probability, Error, Result};
use crate::propensity::{make_weights, Arm, ObservationSet};
use crate::quantile_core::{weighted_quantile_detailed, CheckLossParams, WeightedSample};
use crate::tail_scaling::{compute_h_fixed, compute_h_intermediate, kde_density_at, Regime, TailCdf};

/// Smallest `n * tau_n` accepted by [`estimate_intermediate`].
pub const INTERMEDIATE_FLOOR: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuantileEstimate {
    pub tau: f64,
    pub arm: Arm,
    pub q_hat: f64,
    pub b_n: f64,
    /// Normalization computed from the empirical law of the arm probabilities.
    pub h_n: f64,
    pub effective_weight_total: f64,
    /// The estimate sits at the largest positive-weight outcome of the arm.
    pub boundary_flag: bool,
    pub regime: Regime,
    /// Density of the outcome at the estimate (intermediate regime only).
    pub g_at_q: Option<f64>,
    /// `g_at_q` came from a kernel density estimate rather than the caller.
    pub g_approximate: bool,
    /// Intermediate regime requested at a level that is not close to 0 or 1.
    pub nominal_regime: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QteResult {
    pub tau: f64,
    pub delta_hat: f64,
    pub treated: QuantileEstimate,
    pub control: QuantileEstimate,
}

fn arm_sample(obs: &ObservationSet, scores: &[f64], arm: Arm, b_n: f64) -> Result<WeightedSample> {
    if scores.len() != obs.len() {
        return Err(Error::param("scores", "length differs from observations"));
    }
    let scheme = make_weights(scores, obs.treatments(), arm, b_n)?;
    let (values, weights): (Vec<f64>, Vec<f64>) = obs
        .outcomes()
        .iter()
        .zip(&scheme.weights)
        .filter(|(_, &w)| w > 0.0)
        .map(|(&y, &w)| (y, w))
        .unzip();
    if values.is_empty() {
        return Err(Error::EmptyEffectiveSample(format!(
            "no {} observations carry positive weight",
            arm.as_str()
        )));
    }
    WeightedSample::new(values, weights)
}

fn minimize(sample: &WeightedSample, tau: f64) -> Result<(f64, f64, bool)> {
    let q = weighted_quantile_detailed(sample, &CheckLossParams::new(tau)?)?;
    Ok((q.value, q.total_weight, q.at_upper_support))
}

/// Truncated IPW estimate of the `tau`-quantile of `Y(1)` (treated) or `Y(0)`
/// (control), with weights `D / max(e, b_n)` or `(1 - D) / max(1 - e, b_n)`.
pub fn estimate_arm_quantile(
    obs: &ObservationSet,
    scores: &[f64],
    arm: Arm,
    tau: f64,
    b_n: f64,
) -> Result<QuantileEstimate> {
    check_probability("tau", tau)?;
    let sample = arm_sample(obs, scores, arm, b_n)?;
    let (q_hat, total, boundary) = minimize(&sample, tau)?;
    let h_n = compute_h_fixed(&TailCdf::empirical_for_arm(scores, arm)?, obs.len())?;
    Ok(QuantileEstimate {
        tau,
        arm,
        q_hat,
        b_n,
        h_n,
        effective_weight_total: total,
        boundary_flag: boundary,
        regime: Regime::Fixed,
        g_at_q: None,
        g_approximate: false,
        nominal_regime: false,
    })
}

/// `q1_hat(tau) - q0_hat(tau)` with arm-specific truncation levels.
pub fn estimate_qte(
    obs: &ObservationSet,
    scores: &[f64],
    tau: f64,
    b_n_treated: f64,
    b_n_control: f64,
) -> Result<QteResult> {
    let treated = estimate_arm_quantile(obs, scores, Arm::Treated, tau, b_n_treated)?;
    let control = estimate_arm_quantile(obs, scores, Arm::Control, tau, b_n_control)?;
    Ok(QteResult {
        tau,
        delta_hat: treated.q_hat - control.q_hat,
        treated,
        control,
    })
}

/// Same minimization at an intermediate level `tau_n`. When `g_at_q` is not
/// supplied the outcome density at the estimate is taken from a weighted
/// Gaussian kernel estimate on the arm, and the result is marked approximate.
pub fn estimate_intermediate(
    obs: &ObservationSet,
    scores: &[f64],
    arm: Arm,
    tau_n: f64,
    b_n: f64,
    g_at_q: Option<f64>,
) -> Result<QuantileEstimate> {
    check_probability("tau_n", tau_n)?;
    let product = obs.len() as f64 * tau_n;
    if product < INTERMEDIATE_FLOOR {
        return Err(Error::IntermediateRegimeViolated {
            product,
            floor: INTERMEDIATE_FLOOR,
        });
    }
    let sample = arm_sample(obs, scores, arm, b_n)?;
    let (q_hat, total, boundary) = minimize(&sample, tau_n)?;
    let (g, approximate) = match g_at_q {
        Some(g) => (g, false),
        None => (kde_density_at(sample.values(), sample.weights(), q_hat)?, true),
    };
    let h_n = compute_h_intermediate(&TailCdf::empirical_for_arm(scores, arm)?, obs.len(), tau_n, g)?;
    Ok(QuantileEstimate {
        tau: tau_n,
        arm,
        q_hat,
        b_n,
        h_n,
        effective_weight_total: total,
        boundary_flag: boundary,
        regime: Regime::Intermediate,
        g_at_q: Some(g),
        g_approximate: approximate,
        nominal_regime: tau_n.min(1.0 - tau_n) > 0.1,
    })
}

/// Map from a truncation constant `C` to a level `b_n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruncationScale {
    /// `b_n = C n^{-1/gamma}`, keeping `h_n b_n` bounded.
    #[default]
    InverseGamma,
    /// `b_n = C n^{-gamma}`.
    Gamma,
}

impl TruncationScale {
    pub fn rate(self, n: usize, gamma: f64) -> f64 {
        let nf = n as f64;
        match self {
            TruncationScale::InverseGamma => nf.powf(-1.0 / gamma),
            TruncationScale::Gamma => nf.powf(-gamma),
        }
    }

    pub fn b_n(self, c: f64, n: usize, gamma: f64) -> f64 {
        c * self.rate(n, gamma)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub c: f64,
    pub b_n: f64,
    pub estimate: QuantileEstimate,
}

/// Default constants: `C = 0` followed by 20 log-spaced values running from
/// the first level that clamps any score to the level that clamps all of them.
pub fn default_c_grid(scores: &[f64], arm: Arm, gamma: f64, scale: TruncationScale) -> Result<Vec<f64>> {
    let probs: Vec<f64> = scores.iter().map(|&e| arm.arm_probability(e)).collect();
    let lo = probs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(lo > 0.0 && hi.is_finite()) {
        return Err(Error::EmptyEffectiveSample("no scores for the truncation grid".into()));
    }
    let rate = scale.rate(scores.len(), gamma);
    let (c_lo, c_hi) = (lo / rate, hi / rate);
    let mut grid = vec![0.0];
    let steps = 20;
    for i in 0..steps {
        let s = i as f64 / (steps - 1) as f64;
        grid.push(if c_hi > c_lo {
            (c_lo.ln() + s * (c_hi.ln() - c_lo.ln())).exp()
        } else {
            c_hi
        });
    }
    // Guard the top point against rounding in exp/ln.
    *grid.last_mut().unwrap() = c_hi * (1.0 + 1e-12);
    Ok(grid)
}

/// Estimates along `b_n = scale.b_n(C, n, gamma)` for each `C` in `c_grid`,
/// in grid order.
pub fn truncation_sweep(
    obs: &ObservationSet,
    scores: &[f64],
    arm: Arm,
    tau: f64,
    gamma: f64,
    c_grid: &[f64],
    scale: TruncationScale,
) -> Result<Vec<SweepRow>> {
    if !(gamma > 1.0 && gamma.is_finite()) {
        return Err(Error::param("gamma", format!("{gamma} must exceed 1")));
    }
    if let Some(c) = c_grid.iter().find(|c| !(**c >= 0.0 && c.is_finite())) {
        return Err(Error::param(
            "c_grid",
            format!("{c} is not a finite nonnegative constant"),
        ));
    }
    let n = obs.len();
    c_grid
        .par_iter()
        .map(|&c| {
            let b_n = scale.b_n(c, n, gamma);
            Ok(SweepRow {
                c,
                b_n,
                estimate: estimate_arm_quantile(obs, scores, arm, tau, b_n)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantile_core::weighted_quantile;

    fn obs(y: &[f64], d: &[f64], e: &[f64]) -> ObservationSet {
        ObservationSet::with_scores(y.to_vec(), d.to_vec(), e.to_vec()).unwrap()
    }

    fn unweighted(y: &[f64], tau: f64) -> f64 {
        weighted_quantile(
            &WeightedSample::unweighted(y.to_vec()).unwrap(),
            &CheckLossParams::new(tau).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn constant_scores_give_unweighted_quantile() {
        let y = [3.0, 1.0, 4.0, 1.5, 5.0, 9.0, 2.0, 6.0];
        let d = [1.0, 1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0];
        let o = obs(&y, &d, &[0.5; 8]);
        let est = estimate_arm_quantile(&o, &[0.5; 8], Arm::Treated, 0.5, 0.0).unwrap();
        assert_eq!(est.q_hat, unweighted(&[3.0, 1.0, 1.5, 9.0, 2.0], 0.5));
        let est = estimate_arm_quantile(&o, &[0.5; 8], Arm::Control, 0.5, 0.0).unwrap();
        assert_eq!(est.q_hat, unweighted(&[4.0, 5.0, 6.0], 0.5));
    }

    #[test]
    fn saturated_truncation_gives_unweighted_quantile() {
        let y = [3.0, 1.0, 4.0, 1.5, 5.0, 9.0, 2.0, 6.0];
        let d = [1.0, 1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0];
        let e = [0.01, 0.3, 0.2, 0.05, 0.6, 0.9, 0.02, 0.4];
        let o = obs(&y, &d, &e);
        let est = estimate_arm_quantile(&o, &e, Arm::Treated, 0.7, 0.95).unwrap();
        assert_eq!(est.q_hat, unweighted(&[3.0, 1.0, 1.5, 9.0, 2.0], 0.7));
        assert!(est.q_hat >= 1.0 && est.q_hat <= 9.0);
    }

    #[test]
    fn boundary_flag_and_empty_arm() {
        let o = obs(&[1.0, 2.0, 3.0], &[1.0, 1.0, 1.0], &[0.5, 0.5, 0.5]);
        let e = [0.5; 3];
        assert!(
            estimate_arm_quantile(&o, &e, Arm::Treated, 0.99, 0.0)
                .unwrap()
                .boundary_flag
        );
        assert!(
            !estimate_arm_quantile(&o, &e, Arm::Treated, 0.2, 0.0)
                .unwrap()
                .boundary_flag
        );
        assert!(matches!(
            estimate_arm_quantile(&o, &e, Arm::Control, 0.5, 0.0),
            Err(Error::EmptyEffectiveSample(_))
        ));
    }

    #[test]
    fn arm_relabeling_swaps_estimates() {
        let y = [0.3, 2.0, -1.0, 4.5, 0.0, 1.2, 3.3, -0.7, 2.2, 5.1];
        let d = [1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0];
        let e = [0.1, 0.8, 0.3, 0.04, 0.6, 0.5, 0.2, 0.9, 0.15, 0.7];
        let flipped_d: Vec<f64> = d.iter().map(|v| 1.0 - v).collect();
        let flipped_e: Vec<f64> = e.iter().map(|v| 1.0 - v).collect();
        let a = estimate_qte(&obs(&y, &d, &e), &e, 0.6, 0.1, 0.2).unwrap();
        let b = estimate_qte(&obs(&y, &flipped_d, &flipped_e), &flipped_e, 0.6, 0.2, 0.1).unwrap();
        assert_eq!(a.treated.q_hat, b.control.q_hat);
        assert_eq!(a.control.q_hat, b.treated.q_hat);
        assert_eq!(a.delta_hat, a.treated.q_hat - a.control.q_hat);
    }

    #[test]
    fn intermediate_guard_and_nominal_flag() {
        let n = 50;
        let y: Vec<f64> = (0..n).map(f64::from).collect();
        let d = vec![1.0; n as usize];
        let e = vec![0.5; n as usize];
        let o = obs(&y, &d, &e);
        assert!(matches!(
            estimate_intermediate(&o, &e, Arm::Treated, 0.1, 0.0, Some(1.0)),
            Err(Error::IntermediateRegimeViolated { .. })
        ));
        let est = estimate_intermediate(&o, &e, Arm::Treated, 0.5, 0.2, Some(1.0)).unwrap();
        assert!(est.nominal_regime);
        assert_eq!(est.regime, Regime::Intermediate);
        let est = estimate_intermediate(&o, &e, Arm::Treated, 0.5, 0.2, None).unwrap();
        assert!(est.g_approximate && est.g_at_q.unwrap() > 0.0);
    }

    #[test]
    fn sweep_endpoints() {
        let y = [3.0, 1.0, 4.0, 1.5, 5.0, 9.0, 2.0, 6.0, 0.2, 7.7];
        let d = [1.0, 1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0];
        let e = [0.01, 0.3, 0.2, 0.05, 0.6, 0.9, 0.02, 0.4, 0.5, 0.07];
        let o = obs(&y, &d, &e);
        for scale in [TruncationScale::InverseGamma, TruncationScale::Gamma] {
            let grid = default_c_grid(&e, Arm::Treated, 1.5, scale).unwrap();
            assert_eq!(grid.len(), 21);
            let rows = truncation_sweep(&o, &e, Arm::Treated, 0.6, 1.5, &grid, scale).unwrap();
            let untruncated = estimate_arm_quantile(&o, &e, Arm::Treated, 0.6, 0.0).unwrap();
            assert_eq!(rows[0].estimate.q_hat, untruncated.q_hat);
            let treated_y: Vec<f64> = (0..10).filter(|&i| d[i] == 1.0).map(|i| y[i]).collect();
            assert_eq!(rows[20].estimate.q_hat, unweighted(&treated_y, 0.6));
            assert!(rows[20].b_n >= 0.9);
        }
    }
}
