//! Synthetic designs with limited overlap and the Monte-Carlo experiments
//! run on them: truncation MSE tables, convergence-rate fits and the
//! quadratic-drift diagnostic.
//!
//! Each unit draws a covariate `X` from the propensity law and uses
//! `e(X) = X` as its score. Both potential outcomes are generated; the
//! estimators only see `(Y, D, e)`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::beta::ln_beta;

use crate::error::{check_probability, Error, Result};
use crate::estimators::{estimate_arm_quantile, TruncationScale};
use crate::numerics::{bisect_threshold, integrate, normal_cdf, normal_pdf, ols_slope, pairwise_sum, stream_rng};
use crate::propensity::{fit_logistic, Arm, DesignMatrix, ObservationSet};
use crate::quantile_core::{indicator_integral, weighted_quantile, CheckLossParams, WeightedSample};
use crate::tail_scaling::{compute_h_fixed, TailCdf};

/// Outcome law given the covariate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OutcomeModel {
    /// `Y = 1 + X + Z`, `Z` standard normal.
    ModelA,
    /// `Y = Z e^X`, `Z` Frechet with the given shape.
    ModelB {
        #[serde(default = "default_frechet_shape")]
        shape: f64,
    },
    /// `P(Y <= y) = c e^{alpha y}` for `y <= -ln(c)/alpha`; independent of `X`.
    ExampleExpTail { alpha: f64, c: f64 },
    /// `P(Y <= y) = c |y|^{-p}` for `y <= -c^{1/p}`; independent of `X`.
    ExampleParetoTail { p: f64, c: f64 },
    /// `P(Y <= y) = c e^{-y^2/2}` for `y <= -sqrt(2 ln c)`, `c >= 1`; independent of `X`.
    ExampleGaussianTail { c: f64 },
    /// Normal outcome independent of `X`.
    Custom { mean: f64, sd: f64 },
}

impl OutcomeModel {
    /// Name used in presets and file names.
    pub fn label(&self) -> &'static str {
        match self {
            OutcomeModel::ModelA => "model-a",
            OutcomeModel::ModelB { .. } => "model-b",
            OutcomeModel::ExampleExpTail { .. } => "example-exp-tail",
            OutcomeModel::ExampleParetoTail { .. } => "example-pareto-tail",
            OutcomeModel::ExampleGaussianTail { .. } => "example-gaussian-tail",
            OutcomeModel::Custom { .. } => "custom",
        }
    }
}

fn default_frechet_shape() -> f64 {
    3.0
}

/// Law of the score `e(X) = X`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PropensityLaw {
    Beta {
        alpha: f64,
        beta: f64,
    },
    /// `P(e <= t) = t^{gamma - 1}`.
    Pareto {
        gamma: f64,
    },
}

impl PropensityLaw {
    /// Tail index of the treated side: `alpha + 1` for Beta laws.
    pub fn gamma_treated(&self) -> f64 {
        match *self {
            PropensityLaw::Beta { alpha, .. } => alpha + 1.0,
            PropensityLaw::Pareto { gamma } => gamma,
        }
    }

    pub fn tail_cdf(&self) -> Result<TailCdf> {
        match *self {
            PropensityLaw::Beta { alpha, beta } => TailCdf::beta(alpha, beta),
            PropensityLaw::Pareto { gamma } => TailCdf::pareto(gamma),
        }
    }

    /// `E[h(X)]` by quadrature, with the substitution `x = t^{1/alpha}` that
    /// removes the boundary singularity of the Beta density.
    pub fn expect<H: Fn(f64) -> f64>(&self, h: H) -> Result<f64> {
        match *self {
            PropensityLaw::Beta { alpha, beta } => {
                let norm = alpha * ln_beta(alpha, beta).exp();
                let v = integrate(
                    |t| {
                        let x = t.powf(1.0 / alpha);
                        h(x) * (1.0 - x).powf(beta - 1.0)
                    },
                    0.0,
                    1.0,
                    1e-11,
                    1e-15,
                )?;
                Ok(v / norm)
            }
            PropensityLaw::Pareto { gamma } => integrate(|u| h(u.powf(1.0 / (gamma - 1.0))), 0.0, 1.0, 1e-11, 1e-15),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub outcome: OutcomeModel,
    pub propensity: PropensityLaw,
    /// `Y(0)` has the law of `Y(1)` shifted by this amount.
    #[serde(default)]
    pub control_shift: f64,
    pub seed: u64,
}

impl DgpSpec {
    pub fn model_a(alpha: f64, seed: u64) -> Self {
        Self {
            outcome: OutcomeModel::ModelA,
            propensity: PropensityLaw::Beta { alpha, beta: 2.0 },
            control_shift: 0.0,
            seed,
        }
    }

    pub fn model_b(alpha: f64, seed: u64) -> Self {
        Self {
            outcome: OutcomeModel::ModelB { shape: 3.0 },
            ..Self::model_a(alpha, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        match self.propensity {
            PropensityLaw::Beta { alpha, beta } if !(alpha > 0.0 && beta > 0.0) => {
                return bad("Beta propensity parameters must be positive")
            }
            PropensityLaw::Pareto { gamma } if !(gamma > 1.0 && gamma.is_finite()) => {
                return bad("Pareto propensity gamma must exceed 1")
            }
            _ => {}
        }
        match self.outcome {
            OutcomeModel::ModelB { shape } if !(shape > 0.0) => bad("Frechet shape must be positive"),
            OutcomeModel::ExampleExpTail { alpha, c } if !(alpha > 0.0 && c > 0.0) => {
                bad("exponential tail needs alpha, c > 0")
            }
            OutcomeModel::ExampleParetoTail { p, c } if !(p > 0.0 && c > 0.0) => bad("Pareto tail needs p, c > 0"),
            OutcomeModel::ExampleGaussianTail { c } if !(c >= 1.0 && c.is_finite()) => {
                bad("Gaussian tail needs c >= 1")
            }
            OutcomeModel::Custom { sd, .. } if !(sd > 0.0) => bad("custom outcome sd must be positive"),
            _ if !self.control_shift.is_finite() => bad("control_shift must be finite"),
            _ => Ok(()),
        }
    }

    fn draw_score<R: Rng>(&self, rng: &mut R) -> Result<f64> {
        match self.propensity {
            PropensityLaw::Beta { alpha, beta } => {
                let dist = Beta::new(alpha, beta).map_err(|e| Error::InvalidSpec(e.to_string()))?;
                loop {
                    let x: f64 = rng.sample(dist);
                    if x > 0.0 && x < 1.0 {
                        return Ok(x);
                    }
                }
            }
            PropensityLaw::Pareto { gamma } => loop {
                let x = rng.random::<f64>().powf(1.0 / (gamma - 1.0));
                if x > 0.0 && x < 1.0 {
                    return Ok(x);
                }
            },
        }
    }

    fn draw_outcome<R: Rng>(&self, x: f64, rng: &mut R) -> f64 {
        // 1 - U lies in (0, 1]
        let mut unit = || 1.0 - rng.random::<f64>();
        match self.outcome {
            OutcomeModel::ModelA => 1.0 + x + rng.sample::<f64, _>(StandardNormal),
            OutcomeModel::ModelB { shape } => frechet(unit(), shape) * x.exp(),
            OutcomeModel::ExampleExpTail { alpha, c } => (unit().ln() - c.ln()) / alpha,
            OutcomeModel::ExampleParetoTail { p, c } => -(unit() / c).powf(-1.0 / p),
            OutcomeModel::ExampleGaussianTail { c } => -(2.0 * (c / unit()).ln()).sqrt(),
            OutcomeModel::Custom { mean, sd } => mean + sd * rng.sample::<f64, _>(StandardNormal),
        }
    }

    /// Marginal CDF of `Y(1)`.
    pub fn cdf(&self, y: f64) -> Result<f64> {
        Ok(match self.outcome {
            OutcomeModel::ModelA => self.propensity.expect(|x| normal_cdf(y - 1.0 - x))?,
            OutcomeModel::ModelB { shape } => {
                if y <= 0.0 {
                    0.0
                } else {
                    self.propensity.expect(|x| (-(y * (-x).exp()).powf(-shape)).exp())?
                }
            }
            OutcomeModel::ExampleExpTail { alpha, c } => (c * (alpha * y).exp()).min(1.0),
            OutcomeModel::ExampleParetoTail { p, c } => {
                if y >= 0.0 {
                    1.0
                } else {
                    (c * (-y).powf(-p)).min(1.0)
                }
            }
            OutcomeModel::ExampleGaussianTail { c } => {
                if y >= 0.0 {
                    1.0
                } else {
                    (c * (-y * y / 2.0).exp()).min(1.0)
                }
            }
            OutcomeModel::Custom { mean, sd } => normal_cdf((y - mean) / sd),
        })
    }

    /// Marginal density of `Y(1)`.
    pub fn density(&self, y: f64) -> Result<f64> {
        Ok(match self.outcome {
            OutcomeModel::ModelA => self.propensity.expect(|x| normal_pdf(y - 1.0 - x))?,
            OutcomeModel::ModelB { shape } => {
                if y <= 0.0 {
                    0.0
                } else {
                    self.propensity.expect(|x| {
                        let s = (-x).exp();
                        let z = y * s;
                        s * shape * z.powf(-shape - 1.0) * (-z.powf(-shape)).exp()
                    })?
                }
            }
            OutcomeModel::ExampleExpTail { alpha, c } => {
                let f = c * (alpha * y).exp();
                if f < 1.0 {
                    alpha * f
                } else {
                    0.0
                }
            }
            OutcomeModel::ExampleParetoTail { p, c } => {
                if y < 0.0 && c * (-y).powf(-p) < 1.0 {
                    c * p * (-y).powf(-p - 1.0)
                } else {
                    0.0
                }
            }
            OutcomeModel::ExampleGaussianTail { c } => {
                if y < 0.0 && c * (-y * y / 2.0).exp() < 1.0 {
                    c * (-y) * (-y * y / 2.0).exp()
                } else {
                    0.0
                }
            }
            OutcomeModel::Custom { mean, sd } => normal_pdf((y - mean) / sd) / sd,
        })
    }
}

/// Frechet(shape) by inversion: `(-ln U)^{-1/shape}`.
pub fn frechet(u: f64, shape: f64) -> f64 {
    (-u.ln()).powf(-1.0 / shape)
}

/// One simulated dataset with its hidden potential outcomes.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedData {
    pub observations: ObservationSet,
    pub true_scores: Vec<f64>,
    pub covariate: Vec<f64>,
    pub y1: Vec<f64>,
    pub y0: Vec<f64>,
}

/// Dataset of size `n` from RNG stream 0 of `spec.seed`.
pub fn generate(spec: &DgpSpec, n: usize) -> Result<SimulatedData> {
    generate_stream(spec, n, 0)
}

/// Dataset of size `n` from RNG stream `stream` of `spec.seed`.
pub fn generate_stream(spec: &DgpSpec, n: usize, stream: u64) -> Result<SimulatedData> {
    let mut rng = stream_rng(spec.seed, stream);
    generate_with(spec, n, &mut rng)
}

fn generate_with(spec: &DgpSpec, n: usize, rng: &mut ChaCha8Rng) -> Result<SimulatedData> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::InvalidSpec("n must be at least 1".into()));
    }
    let mut x = Vec::with_capacity(n);
    let mut d = Vec::with_capacity(n);
    let mut y1 = Vec::with_capacity(n);
    let mut y0 = Vec::with_capacity(n);
    for _ in 0..n {
        let xi = spec.draw_score(rng)?;
        let di = if rng.random::<f64>() < xi { 1.0 } else { 0.0 };
        let a = spec.draw_outcome(xi, rng);
        let b = spec.draw_outcome(xi, rng) + spec.control_shift;
        x.push(xi);
        d.push(di);
        y1.push(a);
        y0.push(b);
    }
    let y: Vec<f64> = (0..n).map(|i| if d[i] == 1.0 { y1[i] } else { y0[i] }).collect();
    let observations = ObservationSet::with_scores(y, d, x.clone())?;
    Ok(SimulatedData {
        observations,
        true_scores: x.clone(),
        covariate: x,
        y1,
        y0,
    })
}

/// Analytic `tau`-quantile of `Y(1)`: closed form for the tail examples and
/// the custom normal, CDF inversion by bisection for models (a) and (b).
pub fn oracle_quantile(spec: &DgpSpec, tau: f64) -> Result<f64> {
    check_probability("tau", tau)?;
    spec.validate()?;
    match spec.outcome {
        OutcomeModel::ExampleExpTail { alpha, c } => Ok((tau / c).ln() / alpha),
        OutcomeModel::ExampleParetoTail { p, c } => Ok(-(c / tau).powf(1.0 / p)),
        OutcomeModel::ExampleGaussianTail { c } => Ok(-(2.0 * (c / tau).ln()).sqrt()),
        OutcomeModel::Custom { mean, sd } => {
            let z = bisect_threshold(-40.0, 40.0, |z| normal_cdf(z) >= tau);
            Ok(mean + sd * z)
        }
        OutcomeModel::ModelA => {
            let (lo, hi) = (-40.0, 42.0);
            invert_cdf(spec, tau, lo, hi)
        }
        OutcomeModel::ModelB { shape } => {
            let z = (-tau.ln()).powf(-1.0 / shape);
            invert_cdf(spec, tau, z * 0.999, z * std::f64::consts::E * 1.001)
        }
    }
}

fn invert_cdf(spec: &DgpSpec, tau: f64, lo: f64, hi: f64) -> Result<f64> {
    // CDF evaluations are quadratures; a failure inside the predicate is
    // surfaced after the search.
    let failure = std::sync::Mutex::new(None);
    let q = bisect_threshold(lo, hi, |y| match spec.cdf(y) {
        Ok(f) => f >= tau,
        Err(e) => {
            *failure.lock().unwrap() = Some(e);
            true
        }
    });
    match failure.into_inner().unwrap() {
        Some(e) => Err(e),
        None => Ok(q),
    }
}

/// Monte-Carlo `tau`-quantile of `Y(1)` from `mc_count` draws.
pub fn mc_quantile(spec: &DgpSpec, tau: f64, mc_count: usize, seed: u64) -> Result<f64> {
    check_probability("tau", tau)?;
    spec.validate()?;
    let chunks = mc_count.div_ceil(65_536);
    let mut ys: Vec<f64> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream_rng(seed, c as u64);
            let len = 65_536.min(mc_count - c * 65_536);
            (0..len)
                .map(|_| {
                    let x = spec.draw_score(&mut rng)?;
                    Ok(spec.draw_outcome(x, &mut rng))
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<Vec<f64>>>>()?
        .concat();
    let k = ((tau * mc_count as f64).ceil() as usize).clamp(1, mc_count) - 1;
    let (_, q, _) = ys.select_nth_unstable_by(k, f64::total_cmp);
    Ok(*q)
}

/// How simulation estimators obtain propensity scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    #[default]
    True,
    /// Logistic fit on `[ln x, ln(1 - x), 1]`, which contains the true logit
    /// of the Beta designs.
    Logistic,
}

fn scores_for(data: &SimulatedData, mode: ScoreMode) -> Result<Vec<f64>> {
    match mode {
        ScoreMode::True => Ok(data.true_scores.clone()),
        ScoreMode::Logistic => {
            let x = &data.covariate;
            let design = DesignMatrix::from_columns(
                vec!["ln_x".into(), "ln_1mx".into(), "intercept".into()],
                &[
                    x.iter().map(|v| v.ln()).collect(),
                    x.iter().map(|v| (-v).ln_1p()).collect(),
                    vec![1.0; x.len()],
                ],
            )?;
            let model = fit_logistic(&design, &data.observations.treatments_f64())?;
            Ok(model.predict(&design))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOptions {
    pub score_mode: ScoreMode,
    pub scale: TruncationScale,
    /// Tail index used to map `C` to `b_n`; defaults to the design's value.
    pub gamma: Option<f64>,
}

impl Default for ExperimentOptions {
    fn default() -> Self {
        Self {
            score_mode: ScoreMode::True,
            scale: TruncationScale::InverseGamma,
            gamma: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    /// Unweighted quantile of every `Y(1)`, observed or not.
    Oracle,
    /// Unweighted quantile of the treated outcomes.
    Unweighted,
    /// Truncated IPW at constant `C`.
    Ipw,
}

impl EstimatorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorKind::Oracle => "oracle",
            EstimatorKind::Unweighted => "unweighted",
            EstimatorKind::Ipw => "ipw",
        }
    }
}

/// One replicate of one cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TidyRow {
    pub n: usize,
    pub tau: f64,
    pub estimator: EstimatorKind,
    pub c: Option<f64>,
    pub b_n: Option<f64>,
    pub replicate: usize,
    pub estimate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub n: usize,
    pub tau: f64,
    pub estimator: EstimatorKind,
    pub c: Option<f64>,
    pub b_n: Option<f64>,
    pub truth: f64,
    pub successes: usize,
    pub failures: usize,
    pub bias: f64,
    /// Population variance `(1/R) sum (x - mean)^2`.
    pub variance: f64,
    pub mse: f64,
    /// Lowest MSE among the IPW cells sharing `(n, tau)`.
    pub best: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentResult {
    pub spec: DgpSpec,
    pub oracle_values: Vec<(f64, f64)>,
    pub tidy: Vec<TidyRow>,
    pub summary: Vec<SummaryRow>,
}

/// Default constants: `C = 0` plus values putting `b_n` on a log grid from
/// `1e-4` to `1`, the latter clamping every score.
pub fn default_experiment_c_grid(n: usize, gamma: f64, scale: TruncationScale) -> Vec<f64> {
    let rate = scale.rate(n, gamma);
    let mut grid = vec![0.0];
    for i in 0..=12 {
        let b = 10f64.powf(-4.0 + i as f64 / 3.0);
        grid.push(b / rate);
    }
    grid
}

fn replicate_stream(cell: usize, replicate: usize) -> u64 {
    ((cell as u64) << 32) | replicate as u64
}

/// Bias, population variance and MSE of `estimates` against `truth`.
pub fn mse_decomposition(estimates: &[f64], truth: f64) -> (f64, f64, f64) {
    let r = estimates.len() as f64;
    let mean = pairwise_sum(estimates) / r;
    let dev: Vec<f64> = estimates.iter().map(|x| (x - mean) * (x - mean)).collect();
    let variance = pairwise_sum(&dev) / r;
    let bias = mean - truth;
    (bias, variance, bias * bias + variance)
}

/// Replicated truncation experiment on the treated arm. `c_grid` holds the
/// truncation constants; the oracle and unweighted estimators are added to
/// every `(n, tau)` cell.
pub fn run_mse_experiment(
    spec: &DgpSpec,
    taus: &[f64],
    n_grid: &[usize],
    c_grid: &[f64],
    replications: usize,
    options: &ExperimentOptions,
) -> Result<ExperimentResult> {
    spec.validate()?;
    if replications < 2 {
        return Err(Error::InsufficientReplicates {
            got: replications,
            needed: 2,
        });
    }
    for &tau in taus {
        check_probability("tau", tau)?;
    }
    let gamma = options.gamma.unwrap_or_else(|| spec.propensity.gamma_treated());
    let oracle_values = taus
        .iter()
        .map(|&t| Ok((t, oracle_quantile(spec, t)?)))
        .collect::<Result<Vec<_>>>()?;

    let mut tidy = Vec::new();
    let mut summary = Vec::new();
    for (cell, &n) in n_grid.iter().enumerate() {
        let b_grid: Vec<f64> = c_grid.iter().map(|&c| options.scale.b_n(c, n, gamma)).collect();
        // per replicate: for each tau, [oracle, unweighted, ipw(C_1..C_m)]
        let per_rep: Vec<Vec<Vec<Option<f64>>>> = (0..replications)
            .into_par_iter()
            .map(|r| {
                let data = match generate_stream(spec, n, replicate_stream(cell, r)) {
                    Ok(d) => d,
                    Err(_) => return vec![vec![None; 2 + c_grid.len()]; taus.len()],
                };
                let scores = scores_for(&data, options.score_mode).ok();
                let treated_y: Vec<f64> = data
                    .observations
                    .outcomes()
                    .iter()
                    .zip(data.observations.treatments())
                    .filter(|(_, &d)| d == 1)
                    .map(|(&y, _)| y)
                    .collect();
                taus.iter()
                    .map(|&tau| {
                        let mut row = Vec::with_capacity(2 + c_grid.len());
                        row.push(unweighted_quantile(&data.y1, tau));
                        row.push(unweighted_quantile(&treated_y, tau));
                        for &b in &b_grid {
                            row.push(scores.as_ref().and_then(|s| {
                                estimate_arm_quantile(&data.observations, s, Arm::Treated, tau, b)
                                    .ok()
                                    .map(|e| e.q_hat)
                            }));
                        }
                        row
                    })
                    .collect()
            })
            .collect();

        for (ti, &(tau, truth)) in oracle_values.iter().enumerate() {
            let mut cell_rows: Vec<SummaryRow> = Vec::new();
            for slot in 0..2 + c_grid.len() {
                let (kind, c, b) = match slot {
                    0 => (EstimatorKind::Oracle, None, None),
                    1 => (EstimatorKind::Unweighted, None, None),
                    s => (EstimatorKind::Ipw, Some(c_grid[s - 2]), Some(b_grid[s - 2])),
                };
                let values: Vec<Option<f64>> = per_rep.iter().map(|rep| rep[ti][slot]).collect();
                for (r, v) in values.iter().enumerate() {
                    tidy.push(TidyRow {
                        n,
                        tau,
                        estimator: kind,
                        c,
                        b_n: b,
                        replicate: r,
                        estimate: *v,
                    });
                }
                let ok: Vec<f64> = values.iter().flatten().copied().collect();
                let (bias, variance, mse) = if ok.is_empty() {
                    (f64::NAN, f64::NAN, f64::NAN)
                } else {
                    mse_decomposition(&ok, truth)
                };
                cell_rows.push(SummaryRow {
                    n,
                    tau,
                    estimator: kind,
                    c,
                    b_n: b,
                    truth,
                    successes: ok.len(),
                    failures: values.len() - ok.len(),
                    bias,
                    variance,
                    mse,
                    best: false,
                });
            }
            if let Some(best) = cell_rows
                .iter()
                .enumerate()
                .filter(|(_, r)| r.estimator == EstimatorKind::Ipw && r.mse.is_finite())
                .min_by(|a, b| a.1.mse.total_cmp(&b.1.mse))
                .map(|(i, _)| i)
            {
                cell_rows[best].best = true;
            }
            summary.extend(cell_rows);
        }
    }
    Ok(ExperimentResult {
        spec: *spec,
        oracle_values,
        tidy,
        summary,
    })
}

fn unweighted_quantile(ys: &[f64], tau: f64) -> Option<f64> {
    let sample = WeightedSample::unweighted(ys.to_vec()).ok()?;
    weighted_quantile(&sample, &CheckLossParams::new(tau).ok()?).ok()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateCheck {
    pub slope: f64,
    /// `-(1 - 1/gamma)` for the design's treated tail index.
    pub target: f64,
    pub rmse: Vec<(usize, f64)>,
    pub failures: usize,
}

/// Log-log slope of the RMSE of the truncated IPW estimator at level `b_n`
/// (constant across `n`) against `n`.
pub fn rate_check(spec: &DgpSpec, tau: f64, n_grid: &[usize], replications: usize, b_n: f64) -> Result<RateCheck> {
    rate_check_with(spec, tau, n_grid, replications, |data: &SimulatedData| {
        estimate_arm_quantile(&data.observations, &data.true_scores, Arm::Treated, tau, b_n).map(|e| e.q_hat)
    })
}

/// As [`rate_check`] with an arbitrary estimator.
pub fn rate_check_with<F>(
    spec: &DgpSpec,
    tau: f64,
    n_grid: &[usize],
    replications: usize,
    estimator: F,
) -> Result<RateCheck>
where
    F: Fn(&SimulatedData) -> Result<f64> + Sync,
{
    if n_grid.len() < 3 {
        return Err(Error::param("n_grid", "needs at least three sample sizes"));
    }
    let (lo, hi) = (
        *n_grid.iter().min().unwrap() as f64,
        *n_grid.iter().max().unwrap() as f64,
    );
    if hi / lo < 10.0 {
        return Err(Error::param("n_grid", "must span at least one decade"));
    }
    if replications < 2 {
        return Err(Error::InsufficientReplicates {
            got: replications,
            needed: 2,
        });
    }
    let truth = oracle_quantile(spec, tau)?;
    let mut failures = 0;
    let mut rmse = Vec::with_capacity(n_grid.len());
    for (cell, &n) in n_grid.iter().enumerate() {
        let est: Vec<Option<f64>> = (0..replications)
            .into_par_iter()
            .map(|r| {
                generate_stream(spec, n, replicate_stream(cell, r))
                    .and_then(|d| estimator(&d))
                    .ok()
            })
            .collect();
        let ok: Vec<f64> = est.iter().flatten().copied().collect();
        failures += est.len() - ok.len();
        if ok.is_empty() {
            return Err(Error::EmptyEffectiveSample(format!(
                "every replicate failed at n = {n}"
            )));
        }
        let (_, _, mse) = mse_decomposition(&ok, truth);
        rmse.push((n, mse.sqrt()));
    }
    let lx: Vec<f64> = rmse.iter().map(|(n, _)| (*n as f64).ln()).collect();
    let ly: Vec<f64> = rmse.iter().map(|(_, r)| r.ln()).collect();
    Ok(RateCheck {
        slope: ols_slope(&lx, &ly),
        target: -(1.0 - 1.0 / spec.propensity.gamma_treated()),
        rmse,
        failures,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriftRow {
    pub u: f64,
    pub mc_mean: f64,
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriftReport {
    pub tau: f64,
    pub n: usize,
    pub h_n: f64,
    pub q: f64,
    pub g_at_q: f64,
    pub rows: Vec<DriftRow>,
    /// Largest `|mc_mean / target - 1|` over `u != 0`.
    pub max_relative_deviation: f64,
}

/// Monte-Carlo mean of the quadratic part of the rescaled objective,
/// `(n/h_n^2) sum_i D_i/e_i int_0^{u h_n/n} (1(Y_i <= q + s) - 1(Y_i <= q)) ds`,
/// against its limit `(u^2/2) g(q)`. Uses the true quantile and scores and
/// `h_n` from the design's propensity law.
pub fn quadratic_drift_check(
    spec: &DgpSpec,
    tau: f64,
    n: usize,
    u_grid: &[f64],
    replications: usize,
) -> Result<DriftReport> {
    if replications == 0 {
        return Err(Error::InsufficientReplicates { got: 0, needed: 1 });
    }
    let q = oracle_quantile(spec, tau)?;
    let g = spec.density(q)?;
    let h_n = compute_h_fixed(&spec.propensity.tail_cdf()?, n)?;
    let nf = n as f64;
    let scale = nf / (h_n * h_n);
    let per_rep: Vec<Vec<f64>> = (0..replications)
        .into_par_iter()
        .map(|r| {
            let data = generate_stream(spec, n, replicate_stream(0, r))?;
            let obs = &data.observations;
            Ok(u_grid
                .iter()
                .map(|&u| {
                    let v = u * h_n / nf;
                    let terms: Vec<f64> = obs
                        .outcomes()
                        .iter()
                        .zip(obs.treatments())
                        .zip(&data.true_scores)
                        .filter(|((_, &d), _)| d == 1)
                        .map(|((&y, _), &e)| indicator_integral(y - q, v) / e)
                        .collect();
                    scale * pairwise_sum(&terms)
                })
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(u_grid.len());
    let mut worst: f64 = 0.0;
    for (j, &u) in u_grid.iter().enumerate() {
        let col: Vec<f64> = per_rep.iter().map(|r| r[j]).collect();
        let mc_mean = pairwise_sum(&col) / replications as f64;
        let target = u * u / 2.0 * g;
        if u != 0.0 {
            worst = worst.max((mc_mean / target - 1.0).abs());
        }
        rows.push(DriftRow { u, mc_mean, target });
    }
    Ok(DriftReport {
        tau,
        n,
        h_n,
        q,
        g_at_q: g,
        rows,
        max_relative_deviation: worst,
    })
}
