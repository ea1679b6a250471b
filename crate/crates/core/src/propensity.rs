//! Observational data, propensity-score fitting and truncated IPW weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Treatment arm. The control arm works with `1 - D` and `1 - e`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    Treated,
    Control,
}

impl Arm {
    pub fn as_str(self) -> &'static str {
        match self {
            Arm::Treated => "treated",
            Arm::Control => "control",
        }
    }

    /// Whether a unit with treatment indicator `d` belongs to this arm.
    pub fn contains(self, d: u8) -> bool {
        match self {
            Arm::Treated => d == 1,
            Arm::Control => d == 0,
        }
    }

    /// Probability of landing on this arm given the propensity score.
    pub fn arm_probability(self, score: f64) -> f64 {
        match self {
            Arm::Treated => score,
            Arm::Control => 1.0 - score,
        }
    }
}

impl std::str::FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "treated" | "1" => Ok(Arm::Treated),
            "control" | "0" => Ok(Arm::Control),
            other => Err(Error::Config(format!("unknown arm `{other}`"))),
        }
    }
}

/// Named covariate columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Covariates {
    pub names: Vec<String>,
    pub columns: Vec<Vec<f64>>,
}

impl Covariates {
    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.columns[i].as_slice())
    }
}

/// Row-major design matrix with named columns.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub names: Vec<String>,
    pub rows: usize,
    pub data: Vec<f64>,
}

impl DesignMatrix {
    pub fn cols(&self) -> usize {
        self.names.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// Builds a matrix from named columns of equal length.
    pub fn from_columns(names: Vec<String>, columns: &[Vec<f64>]) -> Result<Self> {
        if names.len() != columns.len() || columns.is_empty() {
            return Err(Error::param("design", "names and columns disagree"));
        }
        let rows = columns[0].len();
        if columns.iter().any(|c| c.len() != rows) {
            return Err(Error::param("design", "columns have unequal lengths"));
        }
        let mut data = Vec::with_capacity(rows * columns.len());
        for i in 0..rows {
            data.extend(columns.iter().map(|c| c[i]));
        }
        Ok(Self { names, rows, data })
    }
}

/// Outcomes, binary treatments and either covariates or propensity scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    outcomes: Vec<f64>,
    treatments: Vec<u8>,
    covariates: Option<Covariates>,
    scores: Option<Vec<f64>>,
    design: Option<DesignMatrix>,
}

impl ObservationSet {
    pub fn new(
        outcomes: Vec<f64>,
        treatments: Vec<f64>,
        covariates: Option<Covariates>,
        scores: Option<Vec<f64>>,
    ) -> Result<Self> {
        let n = outcomes.len();
        if treatments.len() != n {
            return Err(Error::param("treatments", "length differs from outcomes"));
        }
        let treatments = treatments
            .iter()
            .enumerate()
            .map(|(index, &value)| {
                if value == 0.0 {
                    Ok(0u8)
                } else if value == 1.0 {
                    Ok(1u8)
                } else {
                    Err(Error::NonBinaryTreatment { index, value })
                }
            })
            .collect::<Result<Vec<u8>>>()?;
        if let Some(cov) = &covariates {
            if cov.names.len() != cov.columns.len() || cov.columns.iter().any(|c| c.len() != n) {
                return Err(Error::param("covariates", "column lengths differ from outcomes"));
            }
        }
        if let Some(s) = &scores {
            if s.len() != n {
                return Err(Error::param("scores", "length differs from outcomes"));
            }
            validate_scores(s)?;
        }
        Ok(Self {
            outcomes,
            treatments,
            covariates,
            scores,
            design: None,
        })
    }

    /// Observations with precomputed propensity scores.
    pub fn with_scores(outcomes: Vec<f64>, treatments: Vec<f64>, scores: Vec<f64>) -> Result<Self> {
        Self::new(outcomes, treatments, None, Some(scores))
    }

    pub fn len(&self) -> usize {
        self.outcomes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcomes.is_empty()
    }

    pub fn outcomes(&self) -> &[f64] {
        &self.outcomes
    }

    pub fn treatments(&self) -> &[u8] {
        &self.treatments
    }

    pub fn covariates(&self) -> Option<&Covariates> {
        self.covariates.as_ref()
    }

    pub fn scores(&self) -> Option<&[f64]> {
        self.scores.as_deref()
    }

    pub fn design(&self) -> Option<&DesignMatrix> {
        self.design.as_ref()
    }

    pub fn set_scores(&mut self, scores: Vec<f64>) -> Result<()> {
        if scores.len() != self.len() {
            return Err(Error::param("scores", "length differs from outcomes"));
        }
        validate_scores(&scores)?;
        self.scores = Some(scores);
        Ok(())
    }

    pub fn set_design(&mut self, design: DesignMatrix) -> Result<()> {
        if design.rows != self.len() {
            return Err(Error::param("design", "row count differs from outcomes"));
        }
        self.design = Some(design);
        Ok(())
    }

    pub fn treatments_f64(&self) -> Vec<f64> {
        self.treatments.iter().map(|&d| f64::from(d)).collect()
    }

    /// Count of units on `arm`.
    pub fn arm_count(&self, arm: Arm) -> usize {
        self.treatments.iter().filter(|&&d| arm.contains(d)).count()
    }

    /// Rows selected by `indices` (repeats allowed), keeping every attached column.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let pick = |v: &[f64]| indices.iter().map(|&i| v[i]).collect::<Vec<f64>>();
        Self {
            outcomes: pick(&self.outcomes),
            treatments: indices.iter().map(|&i| self.treatments[i]).collect(),
            covariates: self.covariates.as_ref().map(|c| Covariates {
                names: c.names.clone(),
                columns: c.columns.iter().map(|col| pick(col)).collect(),
            }),
            scores: self.scores.as_deref().map(pick),
            design: self.design.as_ref().map(|d| {
                let mut data = Vec::with_capacity(indices.len() * d.cols());
                for &i in indices {
                    data.extend_from_slice(d.row(i));
                }
                DesignMatrix {
                    names: d.names.clone(),
                    rows: indices.len(),
                    data,
                }
            }),
        }
    }
}

fn validate_scores(scores: &[f64]) -> Result<()> {
    match scores.iter().position(|&e| !(e > 0.0 && e < 1.0)) {
        Some(index) => Err(Error::ScoreOutOfRange {
            index,
            value: scores[index],
        }),
        None => Ok(()),
    }
}

/// Raw columns required to build the NSW propensity design.
pub const NSW_REQUIRED_COLUMNS: [&str; 8] = [
    "age",
    "education",
    "earn1974",
    "earn1975",
    "married",
    "black",
    "hispanic",
    "u74",
];

/// Column order of the NSW design. Version 1 of the recipe.
pub const NSW_FEATURE_NAMES: [&str; 13] = [
    "age",
    "education",
    "earn1974",
    "earn1975",
    "age_sq",
    "education_sq",
    "earn1974_sq",
    "earn1975_sq",
    "married",
    "black",
    "hispanic",
    "black_x_u74",
    "intercept",
];

pub const NSW_FEATURE_VERSION: u32 = 1;

/// Builds the NSW design: the four continuous covariates, their squares, the
/// three dummies, `black * u74` and an intercept, in [`NSW_FEATURE_NAMES`] order.
/// Earnings are squared on their raw scale.
pub fn build_nsw_features(raw: &ObservationSet) -> Result<ObservationSet> {
    let cov = raw
        .covariates()
        .ok_or_else(|| Error::MissingColumn(NSW_REQUIRED_COLUMNS[0].to_string()))?;
    let col = |name: &str| cov.column(name).ok_or_else(|| Error::MissingColumn(name.to_string()));
    let age = col("age")?;
    let educ = col("education")?;
    let e74 = col("earn1974")?;
    let e75 = col("earn1975")?;
    let married = col("married")?;
    let black = col("black")?;
    let hisp = col("hispanic")?;
    let u74 = col("u74")?;
    let sq = |v: &[f64]| v.iter().map(|x| x * x).collect::<Vec<f64>>();
    let columns = vec![
        age.to_vec(),
        educ.to_vec(),
        e74.to_vec(),
        e75.to_vec(),
        sq(age),
        sq(educ),
        sq(e74),
        sq(e75),
        married.to_vec(),
        black.to_vec(),
        hisp.to_vec(),
        black.iter().zip(u74).map(|(b, u)| b * u).collect(),
        vec![1.0; raw.len()],
    ];
    let design = DesignMatrix::from_columns(NSW_FEATURE_NAMES.iter().map(|s| s.to_string()).collect(), &columns)?;
    let mut out = raw.clone();
    out.set_design(design)?;
    Ok(out)
}

/// Fitted logistic propensity model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogisticModel {
    pub feature_names: Vec<String>,
    /// Coefficients on the original (unscaled) feature scale.
    pub coefficients: Vec<f64>,
    pub iterations: usize,
    /// Max-norm of the mean log-likelihood gradient on the scaled problem.
    pub gradient_norm: f64,
    pub converged: bool,
    pub separation_warning: bool,
    /// Mean log-likelihood after each accepted Newton step (first entry: start).
    pub loglik_trace: Vec<f64>,
}

impl LogisticModel {
    pub fn linear_predictor(&self, row: &[f64]) -> f64 {
        row.iter().zip(&self.coefficients).map(|(x, b)| x * b).sum()
    }

    /// Fitted scores clamped to `[1e-12, 1 - 1e-12]`.
    pub fn predict(&self, design: &DesignMatrix) -> Vec<f64> {
        (0..design.rows)
            .map(|i| clamp_score(sigmoid(self.linear_predictor(design.row(i)))))
            .collect()
    }
}

pub const SCORE_CLAMP: f64 = 1e-12;
pub const GRADIENT_TOLERANCE: f64 = 1e-8;
pub const MAX_NEWTON_ITERATIONS: usize = 100;
const SEPARATION_PREDICTOR: f64 = 30.0;

fn clamp_score(p: f64) -> f64 {
    p.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP)
}

fn sigmoid(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(eta))` without overflow.
fn softplus(eta: f64) -> f64 {
    if eta > 0.0 {
        eta + (-eta).exp().ln_1p()
    } else {
        eta.exp().ln_1p()
    }
}

fn mean_loglik(x: &[f64], cols: usize, d: &[f64], beta: &[f64]) -> f64 {
    let n = d.len();
    let mut total = 0.0;
    for i in 0..n {
        let eta: f64 = x[i * cols..(i + 1) * cols].iter().zip(beta).map(|(a, b)| a * b).sum();
        total += d[i] * eta - softplus(eta);
    }
    total / n as f64
}

/// In-place Cholesky solve of `a x = b` for symmetric positive definite `a`.
fn cholesky_solve(a: &mut [f64], b: &mut [f64], k: usize) -> Option<()> {
    for j in 0..k {
        let mut diag = a[j * k + j];
        for p in 0..j {
            diag -= a[j * k + p] * a[j * k + p];
        }
        if !(diag > 1e-14 * (1.0 + a[j * k + j].abs())) {
            return None;
        }
        let diag = diag.sqrt();
        a[j * k + j] = diag;
        for i in j + 1..k {
            let mut v = a[i * k + j];
            for p in 0..j {
                v -= a[i * k + p] * a[j * k + p];
            }
            a[i * k + j] = v / diag;
        }
    }
    for i in 0..k {
        let mut v = b[i];
        for p in 0..i {
            v -= a[i * k + p] * b[p];
        }
        b[i] = v / a[i * k + i];
    }
    for i in (0..k).rev() {
        let mut v = b[i];
        for p in i + 1..k {
            v -= a[p * k + i] * b[p];
        }
        b[i] = v / a[i * k + i];
    }
    Some(())
}

/// Maximum-likelihood logistic regression by damped Newton iterations.
///
/// Columns are rescaled to unit root-mean-square before fitting and the
/// coefficients mapped back, so squared earnings do not wreck the Hessian's
/// conditioning. Steps are halved until the log-likelihood does not decrease.
pub fn fit_logistic(design: &DesignMatrix, treatments: &[f64]) -> Result<LogisticModel> {
    let n = design.rows;
    let k = design.cols();
    if treatments.len() != n {
        return Err(Error::param("treatments", "length differs from design rows"));
    }
    if let Some(index) = treatments.iter().position(|&d| d != 0.0 && d != 1.0) {
        return Err(Error::NonBinaryTreatment {
            index,
            value: treatments[index],
        });
    }
    if n <= k {
        return Err(Error::InsufficientData { needed: k + 1, got: n });
    }
    let scales: Vec<f64> = (0..k)
        .map(|j| {
            let ss: f64 = (0..n).map(|i| design.data[i * k + j].powi(2)).sum();
            (ss / n as f64).sqrt()
        })
        .collect();
    if scales.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::SingularHessian { iteration: 0 });
    }
    let x: Vec<f64> = design
        .data
        .iter()
        .enumerate()
        .map(|(idx, v)| v / scales[idx % k])
        .collect();

    let nf = n as f64;
    let mut beta = vec![0.0; k];
    let mut ll = mean_loglik(&x, k, treatments, &beta);
    let mut trace = vec![ll];
    let mut converged = false;
    let mut grad_norm = f64::INFINITY;
    let mut iterations = 0;
    for iter in 0..MAX_NEWTON_ITERATIONS {
        let mut grad = vec![0.0; k];
        let mut hess = vec![0.0; k * k];
        for i in 0..n {
            let row = &x[i * k..(i + 1) * k];
            let eta: f64 = row.iter().zip(&beta).map(|(a, b)| a * b).sum();
            let p = sigmoid(eta);
            let r = treatments[i] - p;
            let w = p * (1.0 - p);
            for a in 0..k {
                grad[a] += r * row[a];
                for b in 0..=a {
                    hess[a * k + b] += w * row[a] * row[b];
                }
            }
        }
        for a in 0..k {
            grad[a] /= nf;
            for b in 0..=a {
                hess[a * k + b] /= nf;
                hess[b * k + a] = hess[a * k + b];
            }
        }
        grad_norm = grad.iter().fold(0.0_f64, |m, g| m.max(g.abs()));
        if grad_norm <= GRADIENT_TOLERANCE {
            converged = true;
            break;
        }
        let mut step = grad.clone();
        if cholesky_solve(&mut hess, &mut step, k).is_none() {
            return Err(Error::SingularHessian { iteration: iter });
        }
        let mut t = 1.0;
        let mut accepted = false;
        while t > 1e-12 {
            let cand: Vec<f64> = beta.iter().zip(&step).map(|(b, s)| b + t * s).collect();
            let cand_ll = mean_loglik(&x, k, treatments, &cand);
            if cand_ll >= ll {
                beta = cand;
                ll = cand_ll;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        iterations = iter + 1;
        if !accepted {
            break;
        }
        trace.push(ll);
    }

    let max_eta = (0..n)
        .map(|i| {
            x[i * k..(i + 1) * k]
                .iter()
                .zip(&beta)
                .map(|(a, b)| a * b)
                .sum::<f64>()
                .abs()
        })
        .fold(0.0_f64, f64::max);
    let constant_treatment = treatments.iter().all(|&d| d == treatments[0]);
    let separation_warning = constant_treatment || (!converged && max_eta > SEPARATION_PREDICTOR);

    Ok(LogisticModel {
        feature_names: design.names.clone(),
        coefficients: beta.iter().zip(&scales).map(|(b, s)| b / s).collect(),
        iterations,
        gradient_norm: grad_norm,
        converged,
        separation_warning,
        loglik_trace: trace,
    })
}

/// Per-unit truncated IPW weights for one arm.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightScheme {
    pub side: Arm,
    pub b_n: f64,
    pub weights: Vec<f64>,
}

/// `D / max(e, b_n)` on the treated side, `(1 - D) / max(1 - e, b_n)` on the
/// control side. `b_n = 0` disables truncation.
pub fn make_weights(scores: &[f64], treatments: &[u8], side: Arm, b_n: f64) -> Result<WeightScheme> {
    if scores.len() != treatments.len() {
        return Err(Error::param("scores", "length differs from treatments"));
    }
    if !(b_n >= 0.0 && b_n.is_finite()) {
        return Err(Error::param("b_n", format!("{b_n} is not a finite nonnegative number")));
    }
    validate_scores(scores)?;
    let weights = scores
        .iter()
        .zip(treatments)
        .map(|(&e, &d)| {
            if side.contains(d) {
                1.0 / side.arm_probability(e).max(b_n)
            } else {
                0.0
            }
        })
        .collect();
    Ok(WeightScheme { side, b_n, weights })
}
