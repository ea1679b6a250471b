//! CSV ingestion and emission, run configuration and manifests.
//!
//! Every numeric output field is written in scientific notation with the
//! shortest representation that parses back to the same `f64`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand_distr::{Exp, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::estimators::{default_c_grid, estimate_qte, truncation_sweep, QuantileEstimate, TruncationScale};
use crate::inference::{interval_from_subsamples, subsample_size, subsample_statistic, Interval, DEFAULT_REPLICATES};
use crate::limit_law::{
    empirical_cf, eval_cf_intermediate, sample_fixed_limit, sample_intermediate_limit, stable_parameters, LimitSpec,
};
use crate::numerics::stream_rng;
use crate::propensity::{
    build_nsw_features, fit_logistic, Arm, Covariates, DesignMatrix, ObservationSet, NSW_REQUIRED_COLUMNS,
};
use crate::sim_lab::{
    default_experiment_c_grid, generate, quadratic_drift_check, rate_check, run_mse_experiment, DgpSpec,
    ExperimentOptions, ScoreMode,
};
use crate::tail_scaling::{
    compute_h_fixed, default_k_max, gamma_at_k, inverse_arm_probabilities, select_order_mindist, truncation_from_theta,
    Regime, TailCdf, TailFit,
};

/// Full-precision scientific notation.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:e}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schema {
    /// NSW when every NSW column is present, generic otherwise.
    #[default]
    Auto,
    Nsw,
    Generic,
}

fn canonical_column(raw: &str) -> String {
    let name = raw.trim().to_ascii_lowercase();
    match name.as_str() {
        "re78" | "earn1978" => "y".into(),
        "treat" | "treatment" => "d".into(),
        "re74" => "earn1974".into(),
        "re75" => "earn1975".into(),
        "educ" => "education".into(),
        _ => name,
    }
}

fn parse_cell(text: &str, row: usize, column: &str) -> Result<f64> {
    let v: f64 = text.trim().parse().map_err(|_| Error::ValueError {
        row,
        column: column.to_string(),
        message: format!("`{text}` is not a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::ValueError {
            row,
            column: column.to_string(),
            message: format!("`{text}` is not finite"),
        });
    }
    Ok(v)
}

/// Reads a CSV file. Row numbers in errors count data rows from 1.
pub fn ingest_csv(path: &Path, schema: Schema) -> Result<ObservationSet> {
    ingest_csv_reader(fs::File::open(path)?, schema)
}

/// As [`ingest_csv`] from any reader.
///
/// Generic schema: `y`, `d` and either `e` or at least one covariate column.
/// NSW schema: `y` (or `re78`), `d` (or `treat`) and the NSW covariates, with
/// `u74` derived from zero 1974 earnings when absent; the design matrix is
/// built on ingestion.
pub fn ingest_csv_reader<R: Read>(reader: R, schema: Schema) -> Result<ObservationSet> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(canonical_column).collect();
    let mut seen = BTreeMap::new();
    for (i, h) in headers.iter().enumerate() {
        if h.is_empty() {
            return Err(Error::SchemaError {
                column: format!("#{}", i + 1),
                row: None,
                message: "empty column name".into(),
            });
        }
        if seen.insert(h.clone(), i).is_some() {
            return Err(Error::SchemaError {
                column: h.clone(),
                row: None,
                message: "duplicate column".into(),
            });
        }
    }
    for required in ["y", "d"] {
        if !seen.contains_key(required) {
            return Err(Error::SchemaError {
                column: required.into(),
                row: None,
                message: "required column is missing".into(),
            });
        }
    }
    let nsw_ready = NSW_REQUIRED_COLUMNS
        .iter()
        .all(|c| seen.contains_key(*c) || (*c == "u74" && seen.contains_key("earn1974")));
    let use_nsw = match schema {
        Schema::Nsw => {
            if let Some(missing) = NSW_REQUIRED_COLUMNS
                .iter()
                .find(|c| !(seen.contains_key(**c) || (**c == "u74" && seen.contains_key("earn1974"))))
            {
                return Err(Error::SchemaError {
                    column: missing.to_string(),
                    row: None,
                    message: "required by the NSW schema".into(),
                });
            }
            true
        }
        Schema::Generic => false,
        Schema::Auto => nsw_ready,
    };
    let has_e = seen.contains_key("e");
    if !use_nsw && !has_e && headers.len() == 2 {
        return Err(Error::SchemaError {
            column: "e".into(),
            row: None,
            message: "generic schema needs a score column or covariate columns".into(),
        });
    }

    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); headers.len()];
    for (r, record) in rdr.records().enumerate() {
        let row = r + 1;
        let record = record?;
        if record.len() != headers.len() {
            return Err(Error::SchemaError {
                column: headers[record.len().min(headers.len() - 1)].clone(),
                row: Some(row),
                message: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        for (j, cell) in record.iter().enumerate() {
            let name = &headers[j];
            let v = parse_cell(cell, row, name)?;
            if name == "d" && v != 0.0 && v != 1.0 {
                return Err(Error::ValueError {
                    row,
                    column: "d".into(),
                    message: format!("treatment must be 0 or 1, found `{}`", cell.trim()),
                });
            }
            if name == "e" && !(v > 0.0 && v < 1.0) {
                return Err(Error::ValueError {
                    row,
                    column: "e".into(),
                    message: format!("score must lie in (0, 1), found `{}`", cell.trim()),
                });
            }
            columns[j].push(v);
        }
    }
    if columns[0].is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }

    let take = |name: &str| columns[seen[name]].clone();
    let y = take("y");
    let d = take("d");
    let e = has_e.then(|| take("e"));
    let mut names = Vec::new();
    let mut covs = Vec::new();
    for (j, h) in headers.iter().enumerate() {
        if !matches!(h.as_str(), "y" | "d" | "e") {
            names.push(h.clone());
            covs.push(columns[j].clone());
        }
    }
    if use_nsw && !seen.contains_key("u74") {
        let e74 = &covs[names.iter().position(|n| n == "earn1974").unwrap()];
        let u74 = e74.iter().map(|&v| if v == 0.0 { 1.0 } else { 0.0 }).collect();
        names.push("u74".into());
        covs.push(u74);
    }
    let covariates = (!names.is_empty()).then_some(Covariates { names, columns: covs });
    let obs = ObservationSet::new(y, d, covariates, e)?;
    if use_nsw {
        build_nsw_features(&obs)
    } else {
        Ok(obs)
    }
}

/// Writes `y`, `d`, `e` (when present) and the covariate columns.
pub fn write_observations<W: Write>(obs: &ObservationSet, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["y".to_string(), "d".to_string()];
    if obs.scores().is_some() {
        header.push("e".into());
    }
    if let Some(c) = obs.covariates() {
        header.extend(c.names.iter().cloned());
    }
    w.write_record(&header)?;
    for i in 0..obs.len() {
        let mut rec = vec![fmt_f64(obs.outcomes()[i]), obs.treatments()[i].to_string()];
        if let Some(s) = obs.scores() {
            rec.push(fmt_f64(s[i]));
        }
        if let Some(c) = obs.covariates() {
            rec.extend(c.columns.iter().map(|col| fmt_f64(col[i])));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_bytes<F: FnOnce(&mut csv::Writer<Vec<u8>>) -> Result<()>>(header: &[&str], body: F) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    body(&mut w)?;
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// `estimates.csv`: one row per arm and level.
pub fn estimates_csv(rows: &[QuantileEstimate]) -> Result<Vec<u8>> {
    csv_bytes(
        &[
            "tau",
            "arm",
            "q_hat",
            "b_n",
            "h_n",
            "boundary_flag",
            "effective_weight_total",
        ],
        |w| {
            for r in rows {
                w.write_record([
                    fmt_f64(r.tau),
                    r.arm.as_str().to_string(),
                    fmt_f64(r.q_hat),
                    fmt_f64(r.b_n),
                    fmt_f64(r.h_n),
                    r.boundary_flag.to_string(),
                    fmt_f64(r.effective_weight_total),
                ])?;
            }
            Ok(())
        },
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreSource {
    /// The `e` column holds estimated scores.
    #[default]
    Column,
    /// Logistic regression on the design (NSW) or the covariate columns plus
    /// an intercept.
    Logistic,
    /// The `e` column holds the true scores.
    True,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GammaSource {
    Fixed(f64),
    HillMindist,
    HillAtK(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Estimate,
    Sweep,
    Tail,
    Subsample,
    Simulate,
    Limitlaw,
    Fixture,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Statistic {
    #[default]
    Qte,
    Treated,
    Control,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentKind {
    #[default]
    Mse,
    Rate,
    Drift,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    /// `fig1-alpha02-n2000` style: `fig1` is model (a), `fig2` model (b);
    /// `alpha02` is 0.2, `alpha05` 0.5, `alpha1` 1.
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub dgp: Option<DgpSpec>,
    #[serde(default)]
    pub experiment: ExperimentKind,
    #[serde(default)]
    pub n_grid: Vec<usize>,
    #[serde(default)]
    pub replications: Option<usize>,
    #[serde(default)]
    pub score_mode: ScoreMode,
    /// Truncation level for rate experiments.
    #[serde(default)]
    pub b_n: f64,
    #[serde(default)]
    pub u_grid: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum FixtureConfig {
    /// A simulated design written as `y, d, e, x`.
    Dgp { dgp: DgpSpec, n: usize },
    /// Synthetic data with the NSW column layout.
    Nsw { n: usize },
}

/// Run configuration. `seed` has no default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: Command,
    #[serde(default)]
    pub input: Option<PathBuf>,
    #[serde(default)]
    pub schema: Schema,
    #[serde(default)]
    pub score_source: ScoreSource,
    #[serde(default)]
    pub taus: Vec<f64>,
    /// Truncation intensity: `b_n = theta / h_n` per arm.
    #[serde(default)]
    pub theta: Option<f64>,
    #[serde(default)]
    pub c_grid: Option<Vec<f64>>,
    #[serde(default)]
    pub truncation_scale: TruncationScale,
    #[serde(default)]
    pub gamma: Option<GammaSource>,
    #[serde(default)]
    pub arm: Option<Arm>,
    #[serde(default)]
    pub statistic: Statistic,
    /// Number of subsamples.
    #[serde(default)]
    pub b: Option<usize>,
    #[serde(default)]
    pub n_b: Option<usize>,
    #[serde(default)]
    pub replacement: bool,
    #[serde(default = "default_level")]
    pub level: f64,
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub simulation: Option<SimulationConfig>,
    #[serde(default)]
    pub limit: Option<LimitSpec>,
    #[serde(default)]
    pub draws: Option<usize>,
    #[serde(default)]
    pub fixture: Option<FixtureConfig>,
}

fn default_level() -> f64 {
    0.95
}

impl RunConfig {
    pub fn new(command: Command, seed: u64, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            command,
            input: None,
            schema: Schema::Auto,
            score_source: ScoreSource::Column,
            taus: Vec::new(),
            theta: None,
            c_grid: None,
            truncation_scale: TruncationScale::InverseGamma,
            gamma: None,
            arm: None,
            statistic: Statistic::Qte,
            b: None,
            n_b: None,
            replacement: false,
            level: default_level(),
            seed,
            output_dir: output_dir.into(),
            simulation: None,
            limit: None,
            draws: None,
            fixture: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for &t in &self.taus {
            if !(t > 0.0 && t < 1.0) {
                return bad(format!("tau {t} is not in (0, 1)"));
            }
        }
        if let Some(th) = self.theta {
            if !(th >= 0.0 && th.is_finite()) {
                return bad(format!("theta {th} must be finite and nonnegative"));
            }
        }
        if let Some(g) = &self.c_grid {
            if g.is_empty() || g.iter().any(|c| !(*c >= 0.0 && c.is_finite())) {
                return bad("c_grid needs finite nonnegative constants".into());
            }
        }
        if let Some(GammaSource::Fixed(g)) = self.gamma {
            if !(g > 1.0 && g.is_finite()) {
                return bad(format!("fixed gamma {g} must exceed 1"));
            }
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return bad(format!("level {} is not in (0, 1)", self.level));
        }
        let needs_input = matches!(
            self.command,
            Command::Estimate | Command::Sweep | Command::Tail | Command::Subsample
        );
        if needs_input && self.input.is_none() {
            return bad(format!("`{:?}` needs an input file", self.command).to_lowercase());
        }
        if needs_input && self.command != Command::Tail && self.taus.is_empty() {
            return bad("at least one tau is required".into());
        }
        match self.command {
            Command::Sweep if self.gamma.is_none() => bad("sweep needs a gamma source".into()),
            Command::Simulate if self.simulation.is_none() => bad("simulate needs a simulation block".into()),
            Command::Limitlaw if self.limit.is_none() => bad("limitlaw needs a limit specification".into()),
            Command::Fixture if self.fixture.is_none() => bad("fixture needs a fixture block".into()),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputEntry {
    pub file: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: RunConfig,
    pub library_version: String,
    /// Stage name and wall time in seconds.
    pub timings: Vec<(String, f64)>,
    pub warnings: Vec<String>,
    pub outputs: Vec<OutputEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

struct Run {
    dir: PathBuf,
    outputs: Vec<OutputEntry>,
    warnings: Vec<String>,
    timings: Vec<(String, f64)>,
    clock: Instant,
}

impl Run {
    fn write(&mut self, name: &str, bytes: Vec<u8>) -> Result<()> {
        fs::write(self.dir.join(name), &bytes)?;
        self.outputs.push(OutputEntry {
            file: name.to_string(),
            sha256: sha256_hex(&bytes),
            bytes: bytes.len(),
        });
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write(name, bytes)
    }

    fn stage(&mut self, name: &str) {
        let now = Instant::now();
        self.timings
            .push((name.to_string(), now.duration_since(self.clock).as_secs_f64()));
        self.clock = now;
    }
}

/// Runs one command, writes its outputs and `manifest.json` into
/// `config.output_dir`, and returns the manifest.
pub fn run_command(config: &RunConfig) -> Result<RunManifest> {
    config.validate()?;
    fs::create_dir_all(&config.output_dir)?;
    let mut run = Run {
        dir: config.output_dir.clone(),
        outputs: Vec::new(),
        warnings: Vec::new(),
        timings: Vec::new(),
        clock: Instant::now(),
    };
    match config.command {
        Command::Estimate => cmd_estimate(config, &mut run)?,
        Command::Sweep => cmd_sweep(config, &mut run)?,
        Command::Tail => cmd_tail(config, &mut run)?,
        Command::Subsample => cmd_subsample(config, &mut run)?,
        Command::Simulate => cmd_simulate(config, &mut run)?,
        Command::Limitlaw => cmd_limitlaw(config, &mut run)?,
        Command::Fixture => cmd_fixture(config, &mut run)?,
    }
    let manifest = RunManifest {
        config: config.clone(),
        library_version: env!("CARGO_PKG_VERSION").to_string(),
        timings: run.timings,
        warnings: run.warnings,
        outputs: run.outputs,
    };
    let mut bytes = serde_json::to_vec_pretty(&manifest)?;
    bytes.push(b'\n');
    fs::write(config.output_dir.join("manifest.json"), bytes)?;
    Ok(manifest)
}

/// Loads the input and attaches scores per the configured source.
fn load_scored(config: &RunConfig, run: &mut Run) -> Result<ObservationSet> {
    let path = config
        .input
        .as_ref()
        .ok_or_else(|| Error::Config("missing input".into()))?;
    let mut obs = ingest_csv(path, config.schema)?;
    run.stage("ingest");
    match config.score_source {
        ScoreSource::Column | ScoreSource::True => {
            if obs.scores().is_none() {
                return Err(Error::SchemaError {
                    column: "e".into(),
                    row: None,
                    message: "score source needs an `e` column".into(),
                });
            }
        }
        ScoreSource::Logistic => {
            let design = match obs.design() {
                Some(d) => d.clone(),
                None => {
                    let cov = obs
                        .covariates()
                        .ok_or_else(|| Error::Config("logistic scores need covariate columns".into()))?;
                    let mut names = cov.names.clone();
                    let mut cols = cov.columns.clone();
                    names.push("intercept".into());
                    cols.push(vec![1.0; obs.len()]);
                    DesignMatrix::from_columns(names, &cols)?
                }
            };
            let model = fit_logistic(&design, &obs.treatments_f64())?;
            if model.separation_warning {
                run.warnings.push("logistic fit: quasi-separation detected".into());
            }
            if !model.converged {
                run.warnings.push(format!(
                    "logistic fit did not converge (gradient {:e})",
                    model.gradient_norm
                ));
            }
            obs.set_scores(model.predict(&design))?;
            run.stage("propensity");
        }
    }
    Ok(obs)
}

fn resolve_gamma(source: GammaSource, scores: &[f64], arm: Arm) -> Result<f64> {
    match source {
        GammaSource::Fixed(g) => Ok(g),
        GammaSource::HillMindist => {
            let data = inverse_arm_probabilities(scores, arm);
            Ok(select_order_mindist(&data, default_k_max(data.len()))?.gamma_hat)
        }
        GammaSource::HillAtK(k) => gamma_at_k(&inverse_arm_probabilities(scores, arm), k),
    }
}

fn theta_level(scores: &[f64], n: usize, arm: Arm, theta: f64) -> Result<f64> {
    if theta == 0.0 {
        return Ok(0.0);
    }
    let h = compute_h_fixed(&TailCdf::empirical_for_arm(scores, arm)?, n)?;
    truncation_from_theta(h, theta, Regime::Fixed, 1.0)
}

fn cmd_estimate(config: &RunConfig, run: &mut Run) -> Result<()> {
    let obs = load_scored(config, run)?;
    let scores = obs.scores().unwrap().to_vec();
    let theta = config.theta.unwrap_or(0.0);
    let b1 = theta_level(&scores, obs.len(), Arm::Treated, theta)?;
    let b0 = theta_level(&scores, obs.len(), Arm::Control, theta)?;
    let mut rows = Vec::new();
    let mut qte = Vec::new();
    for &tau in &config.taus {
        let r = estimate_qte(&obs, &scores, tau, b1, b0)?;
        for est in [&r.treated, &r.control] {
            if est.boundary_flag {
                run.warnings.push(format!(
                    "{} estimate at tau {} sits on the largest outcome",
                    est.arm.as_str(),
                    tau
                ));
            }
        }
        qte.push((tau, r.delta_hat, r.treated.q_hat, r.control.q_hat));
        rows.push(r.treated);
        rows.push(r.control);
    }
    run.stage("estimate");
    run.write("estimates.csv", estimates_csv(&rows)?)?;
    let bytes = csv_bytes(&["tau", "delta_hat", "q1_hat", "q0_hat"], |w| {
        for (t, d, a, b) in &qte {
            w.write_record([fmt_f64(*t), fmt_f64(*d), fmt_f64(*a), fmt_f64(*b)])?;
        }
        Ok(())
    })?;
    run.write("qte.csv", bytes)
}

fn cmd_sweep(config: &RunConfig, run: &mut Run) -> Result<()> {
    let obs = load_scored(config, run)?;
    let scores = obs.scores().unwrap().to_vec();
    let arms = match config.arm {
        Some(a) => vec![a],
        None => vec![Arm::Treated, Arm::Control],
    };
    let mut rows = Vec::new();
    for arm in arms {
        let gamma = resolve_gamma(config.gamma.unwrap(), &scores, arm)?;
        let grid = match &config.c_grid {
            Some(g) => g.clone(),
            None => default_c_grid(&scores, arm, gamma, config.truncation_scale)?,
        };
        for &tau in &config.taus {
            for r in truncation_sweep(&obs, &scores, arm, tau, gamma, &grid, config.truncation_scale)? {
                rows.push((arm, gamma, r));
            }
        }
    }
    run.stage("sweep");
    let bytes = csv_bytes(&["C", "b_n", "tau", "q_hat", "arm", "gamma"], |w| {
        for (arm, gamma, r) in &rows {
            w.write_record([
                fmt_f64(r.c),
                fmt_f64(r.b_n),
                fmt_f64(r.estimate.tau),
                fmt_f64(r.estimate.q_hat),
                arm.as_str().to_string(),
                fmt_f64(*gamma),
            ])?;
        }
        Ok(())
    })?;
    run.write("sweep.csv", bytes)
}

/// Hill curve and minimum-distance fit per arm.
pub fn hill_csv(fits: &[(Arm, TailFit)]) -> Result<Vec<u8>> {
    csv_bytes(&["k", "xi_hat", "ks_dist", "arm"], |w| {
        for (arm, fit) in fits {
            for ((k, xi), (_, ks)) in fit.hill_curve.iter().zip(&fit.ks_distances) {
                w.write_record([k.to_string(), fmt_f64(*xi), fmt_f64(*ks), arm.as_str().to_string()])?;
            }
        }
        Ok(())
    })
}

#[derive(Debug, Clone, Serialize)]
struct TailSummary {
    arm: Arm,
    gamma_hat: f64,
    xi_hat: f64,
    k_selected: usize,
    k_max: usize,
    within_theory: bool,
}

fn cmd_tail(config: &RunConfig, run: &mut Run) -> Result<()> {
    let obs = load_scored(config, run)?;
    let scores = obs.scores().unwrap().to_vec();
    let arms = match config.arm {
        Some(a) => vec![a],
        None => vec![Arm::Treated, Arm::Control],
    };
    let mut fits = Vec::new();
    let mut summary = Vec::new();
    for arm in arms {
        let data = inverse_arm_probabilities(&scores, arm);
        let k_max = default_k_max(data.len());
        let fit = select_order_mindist(&data, k_max)?;
        if !fit.within_theory {
            run.warnings
                .push(format!("{} tail index outside (1, inf)", arm.as_str()));
        }
        summary.push(TailSummary {
            arm,
            gamma_hat: fit.gamma_hat,
            xi_hat: fit.xi_hat,
            k_selected: fit.k_selected,
            k_max,
            within_theory: fit.within_theory,
        });
        fits.push((arm, fit));
    }
    run.stage("tail");
    run.write("hill.csv", hill_csv(&fits)?)?;
    run.write_json("tail.json", &summary)
}

#[derive(Debug, Clone, Serialize)]
struct IntervalRow {
    statistic: String,
    tau: f64,
    point_estimate: f64,
    failures: usize,
    interval: Interval,
}

fn cmd_subsample(config: &RunConfig, run: &mut Run) -> Result<()> {
    let obs = load_scored(config, run)?;
    let n = obs.len();
    let n_b = match config.n_b {
        Some(v) => v,
        None => subsample_size(n)?,
    };
    let b = config.b.unwrap_or(DEFAULT_REPLICATES);
    let theta = config.theta.unwrap_or(0.0);
    let statistic = config.statistic;
    let eval = move |o: &ObservationSet, tau: f64| -> Result<f64> {
        let s = o.scores().unwrap();
        let b1 = theta_level(s, o.len(), Arm::Treated, theta)?;
        let b0 = theta_level(s, o.len(), Arm::Control, theta)?;
        match statistic {
            Statistic::Qte => Ok(estimate_qte(o, s, tau, b1, b0)?.delta_hat),
            Statistic::Treated => Ok(crate::estimators::estimate_arm_quantile(o, s, Arm::Treated, tau, b1)?.q_hat),
            Statistic::Control => Ok(crate::estimators::estimate_arm_quantile(o, s, Arm::Control, tau, b0)?.q_hat),
        }
    };
    let scores = obs.scores().unwrap().to_vec();
    let rate = match (config.gamma, statistic) {
        (None, _) => None,
        (Some(src), Statistic::Control) => Some(1.0 - 1.0 / resolve_gamma(src, &scores, Arm::Control)?),
        (Some(src), Statistic::Treated) => Some(1.0 - 1.0 / resolve_gamma(src, &scores, Arm::Treated)?),
        (Some(src), Statistic::Qte) => {
            // the heavier arm dominates
            let g = resolve_gamma(src, &scores, Arm::Treated)?.min(resolve_gamma(src, &scores, Arm::Control)?);
            Some(1.0 - 1.0 / g)
        }
    };
    let name = match statistic {
        Statistic::Qte => "qte",
        Statistic::Treated => "q1",
        Statistic::Control => "q0",
    };
    let mut dists = Vec::new();
    let mut intervals = Vec::new();
    for (i, &tau) in config.taus.iter().enumerate() {
        let label = format!("{name}@{}", fmt_f64(tau));
        let seed = config.seed.wrapping_add(i as u64);
        let dist = subsample_statistic(&obs, &label, |o| eval(o, tau), b, n_b, seed, config.replacement)?;
        if let Some(msg) = &dist.first_failure {
            run.warnings
                .push(format!("{label}: {} failed replicates, first: {msg}", dist.failures()));
        }
        let point = eval(&obs, tau)?;
        let interval = interval_from_subsamples(&dist, point, config.level, rate)?;
        intervals.push(IntervalRow {
            statistic: label,
            tau,
            point_estimate: point,
            failures: dist.failures(),
            interval,
        });
        dists.push(dist);
    }
    run.stage("subsample");
    let bytes = csv_bytes(&["replicate", "statistic", "value"], |w| {
        for d in &dists {
            for (r, v) in d.replicates.iter().enumerate() {
                w.write_record([r.to_string(), d.statistic.clone(), fmt_opt(*v)])?;
            }
        }
        Ok(())
    })?;
    run.write("subsample.csv", bytes)?;
    run.write_json("intervals.json", &intervals)
}

/// Resolved simulation preset.
#[derive(Debug, Clone, PartialEq)]
pub struct Preset {
    pub dgp: DgpSpec,
    pub n: usize,
    pub tau: f64,
    pub replications: usize,
}

/// Parses `fig{1,2}-alpha{digits}-n{size}`.
pub fn parse_preset(name: &str, seed: u64) -> Result<Preset> {
    let bad = || Error::Config(format!("unknown preset `{name}`"));
    let parts: Vec<&str> = name.split('-').collect();
    if parts.len() != 3 {
        return Err(bad());
    }
    let alpha_digits = parts[1].strip_prefix("alpha").ok_or_else(bad)?;
    if alpha_digits.is_empty() || !alpha_digits.bytes().all(|b| b.is_ascii_digit()) {
        return Err(bad());
    }
    let alpha: f64 = if let Some(frac) = alpha_digits.strip_prefix('0') {
        format!("0.{frac}").parse().map_err(|_| bad())?
    } else {
        alpha_digits.parse().map_err(|_| bad())?
    };
    let n: usize = parts[2].strip_prefix('n').ok_or_else(bad)?.parse().map_err(|_| bad())?;
    if !(alpha > 0.0) || n < 2 {
        return Err(bad());
    }
    let dgp = match parts[0] {
        "fig1" => DgpSpec::model_a(alpha, seed),
        "fig2" => DgpSpec::model_b(alpha, seed),
        _ => return Err(bad()),
    };
    Ok(Preset {
        dgp,
        n,
        tau: 0.9,
        replications: 100,
    })
}

fn cmd_simulate(config: &RunConfig, run: &mut Run) -> Result<()> {
    let sim = config.simulation.as_ref().unwrap();
    let preset = sim
        .preset
        .as_deref()
        .map(|p| parse_preset(p, config.seed))
        .transpose()?;
    let mut dgp = match (&sim.dgp, &preset) {
        (Some(d), _) => *d,
        (None, Some(p)) => p.dgp,
        (None, None) => return Err(Error::Config("simulation needs a preset or a dgp".into())),
    };
    dgp.seed = config.seed;
    let taus = if !config.taus.is_empty() {
        config.taus.clone()
    } else if let Some(p) = &preset {
        vec![p.tau]
    } else {
        return Err(Error::Config("simulation needs at least one tau".into()));
    };
    let n_grid = if !sim.n_grid.is_empty() {
        sim.n_grid.clone()
    } else if let Some(p) = &preset {
        vec![p.n]
    } else {
        return Err(Error::Config("simulation needs n_grid".into()));
    };
    match sim.experiment {
        ExperimentKind::Mse => {
            let reps = sim
                .replications
                .or(preset.as_ref().map(|p| p.replications))
                .unwrap_or(100);
            let gamma = match config.gamma {
                Some(GammaSource::Fixed(g)) => Some(g),
                Some(_) => return Err(Error::Config("simulations take a fixed gamma only".into())),
                None => None,
            };
            let options = ExperimentOptions {
                score_mode: sim.score_mode,
                scale: config.truncation_scale,
                gamma,
            };
            let g = gamma.unwrap_or_else(|| dgp.propensity.gamma_treated());
            let c_grid = config
                .c_grid
                .clone()
                .unwrap_or_else(|| default_experiment_c_grid(n_grid[0], g, config.truncation_scale));
            let res = run_mse_experiment(&dgp, &taus, &n_grid, &c_grid, reps, &options)?;
            run.stage("experiment");
            let tidy = csv_bytes(&["n", "tau", "estimator", "C", "b_n", "replicate", "estimate"], |w| {
                for r in &res.tidy {
                    w.write_record([
                        r.n.to_string(),
                        fmt_f64(r.tau),
                        r.estimator.as_str().to_string(),
                        fmt_opt(r.c),
                        fmt_opt(r.b_n),
                        r.replicate.to_string(),
                        fmt_opt(r.estimate),
                    ])?;
                }
                Ok(())
            })?;
            run.write("tidy.csv", tidy)?;
            let failures: usize = res.summary.iter().map(|r| r.failures).sum();
            if failures > 0 {
                run.warnings.push(format!("{failures} failed replicate estimates"));
            }
            run.write("summary.csv", summary_csv(&res.summary)?)
        }
        ExperimentKind::Rate => {
            let reps = sim.replications.unwrap_or(500);
            let tau = taus[0];
            let rc = rate_check(&dgp, tau, &n_grid, reps, sim.b_n)?;
            run.stage("experiment");
            let bytes = csv_bytes(&["n", "rmse", "slope", "target"], |w| {
                for (n, r) in &rc.rmse {
                    w.write_record([n.to_string(), fmt_f64(*r), fmt_f64(rc.slope), fmt_f64(rc.target)])?;
                }
                Ok(())
            })?;
            run.write("rate.csv", bytes)
        }
        ExperimentKind::Drift => {
            let reps = sim.replications.unwrap_or(200);
            let u_grid = sim.u_grid.clone().unwrap_or_else(|| vec![-2.0, -1.0, 1.0, 2.0]);
            let rep = quadratic_drift_check(&dgp, taus[0], n_grid[0], &u_grid, reps)?;
            run.stage("experiment");
            let bytes = csv_bytes(&["u", "mc_mean", "target"], |w| {
                for r in &rep.rows {
                    w.write_record([fmt_f64(r.u), fmt_f64(r.mc_mean), fmt_f64(r.target)])?;
                }
                Ok(())
            })?;
            run.write("drift.csv", bytes)?;
            run.write_json("drift.json", &rep)
        }
    }
}

/// `summary.csv` of an MSE experiment.
pub fn summary_csv(rows: &[crate::sim_lab::SummaryRow]) -> Result<Vec<u8>> {
    csv_bytes(
        &[
            "n",
            "tau",
            "estimator",
            "C",
            "b_n",
            "truth",
            "successes",
            "failures",
            "bias",
            "var",
            "mse",
            "best",
        ],
        |w| {
            for r in rows {
                w.write_record([
                    r.n.to_string(),
                    fmt_f64(r.tau),
                    r.estimator.as_str().to_string(),
                    fmt_opt(r.c),
                    fmt_opt(r.b_n),
                    fmt_f64(r.truth),
                    r.successes.to_string(),
                    r.failures.to_string(),
                    fmt_f64(r.bias),
                    fmt_f64(r.variance),
                    fmt_f64(r.mse),
                    r.best.to_string(),
                ])?;
            }
            Ok(())
        },
    )
}

fn cmd_limitlaw(config: &RunConfig, run: &mut Run) -> Result<()> {
    let spec = config.limit.as_ref().unwrap();
    spec.validate()?;
    let count = config.draws.unwrap_or(100_000);
    match spec {
        LimitSpec::Fixed(s) => {
            let draws = sample_fixed_limit(s, count, config.seed)?;
            run.stage("sample");
            let mut header = vec!["draw".to_string()];
            header.extend((0..s.k()).map(|j| format!("z{j}")));
            let refs: Vec<&str> = header.iter().map(String::as_str).collect();
            let bytes = csv_bytes(&refs, |w| {
                for (i, d) in draws.iter().enumerate() {
                    let mut rec = vec![i.to_string()];
                    rec.extend(d.iter().map(|&x| fmt_f64(x)));
                    w.write_record(&rec)?;
                }
                Ok(())
            })?;
            run.write("draws.csv", bytes)?;
            if s.theta == 0.0 && s.k() == 1 {
                let (alpha, skew, scale) = stable_parameters(s)?;
                run.write_json(
                    "stable.json",
                    &serde_json::json!({ "alpha": alpha, "skewness": skew, "scale": scale }),
                )?;
            }
            Ok(())
        }
        LimitSpec::Intermediate(s) => {
            let draws = sample_intermediate_limit(s, count, config.seed)?;
            run.stage("sample");
            let bytes = csv_bytes(&["draw", "z"], |w| {
                for (i, x) in draws.iter().enumerate() {
                    w.write_record([i.to_string(), fmt_f64(*x)])?;
                }
                Ok(())
            })?;
            run.write("draws.csv", bytes)?;
            let mut rows = Vec::new();
            for i in -20..=20 {
                let a = 0.25 * i as f64;
                rows.push((a, eval_cf_intermediate(s, a)?, empirical_cf(&draws, a)));
            }
            run.stage("cf");
            let bytes = csv_bytes(
                &["a", "re_analytic", "im_analytic", "re_empirical", "im_empirical"],
                |w| {
                    for (a, x, y) in &rows {
                        w.write_record([fmt_f64(*a), fmt_f64(x.re), fmt_f64(x.im), fmt_f64(y.re), fmt_f64(y.im)])?;
                    }
                    Ok(())
                },
            )?;
            run.write("cf.csv", bytes)
        }
        LimitSpec::Gaussian(s) => {
            let k = s.taus.len();
            let mut rng = stream_rng(config.seed, 0);
            let l = cholesky(&s.covariance)?;
            let mut header = vec!["draw".to_string()];
            header.extend((0..k).map(|j| format!("z{j}")));
            let refs: Vec<&str> = header.iter().map(String::as_str).collect();
            let bytes = csv_bytes(&refs, |w| {
                for i in 0..count {
                    let z: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
                    let mut rec = vec![i.to_string()];
                    for row in &l {
                        rec.push(fmt_f64(row.iter().zip(&z).map(|(a, b)| a * b).sum()));
                    }
                    w.write_record(&rec)?;
                }
                Ok(())
            })?;
            run.stage("sample");
            run.write("draws.csv", bytes)
        }
    }
}

/// Lower Cholesky factor of a positive semidefinite matrix; zero pivots give
/// zero columns.
fn cholesky(a: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let k = a.len();
    let mut l = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in 0..=i {
            let s: f64 = (0..j).map(|m| l[i][m] * l[j][m]).sum();
            if i == j {
                let d = a[i][i] - s;
                if d < -1e-10 * (1.0 + a[i][i].abs()) {
                    return Err(Error::InvalidSpec("covariance is not positive semidefinite".into()));
                }
                l[i][i] = d.max(0.0).sqrt();
            } else {
                l[i][j] = if l[j][j] > 0.0 { (a[i][j] - s) / l[j][j] } else { 0.0 };
            }
        }
    }
    Ok(l)
}

fn cmd_fixture(config: &RunConfig, run: &mut Run) -> Result<()> {
    match config.fixture.as_ref().unwrap() {
        FixtureConfig::Dgp { dgp, n } => {
            let spec = DgpSpec {
                seed: config.seed,
                ..*dgp
            };
            let data = generate(&spec, *n)?;
            let obs = ObservationSet::new(
                data.observations.outcomes().to_vec(),
                data.observations.treatments_f64(),
                Some(Covariates {
                    names: vec!["x".into()],
                    columns: vec![data.covariate.clone()],
                }),
                Some(data.true_scores.clone()),
            )?;
            let mut bytes = Vec::new();
            write_observations(&obs, &mut bytes)?;
            run.stage("generate");
            run.write("data.csv", bytes)
        }
        FixtureConfig::Nsw { n } => {
            let bytes = nsw_fixture(*n, config.seed)?;
            run.stage("generate");
            run.write("data.csv", bytes)
        }
    }
}

/// Synthetic data with the NSW column layout (`treat, age, educ, black,
/// hispanic, married, nodegree, re74, re75, re78`) and a logistic assignment
/// that leaves few treated units at high prior earnings.
pub fn nsw_fixture(n: usize, seed: u64) -> Result<Vec<u8>> {
    if n == 0 {
        return Err(Error::InvalidSpec("fixture size must be positive".into()));
    }
    let mut rng = stream_rng(seed, 0);
    let earn = Exp::new(1.0 / 9000.0).map_err(|e| Error::InvalidSpec(e.to_string()))?;
    csv_bytes(
        &[
            "treat", "age", "educ", "black", "hispanic", "married", "nodegree", "re74", "re75", "re78",
        ],
        |w| {
            for _ in 0..n {
                let age = 17.0 + (rng.random::<f64>() * 38.0).floor();
                let educ = 4.0 + (rng.random::<f64>() * 13.0).floor();
                let black = f64::from(rng.random::<f64>() < 0.5);
                let hispanic = if black == 1.0 {
                    0.0
                } else {
                    f64::from(rng.random::<f64>() < 0.2)
                };
                let married = f64::from(rng.random::<f64>() < 0.4);
                let nodegree = f64::from(educ < 12.0);
                let re74 = if rng.random::<f64>() < 0.4 {
                    0.0
                } else {
                    rng.sample(earn)
                };
                let re75 = if rng.random::<f64>() < 0.4 {
                    0.0
                } else {
                    rng.sample(earn)
                };
                let u74 = f64::from(re74 == 0.0);
                let logit = 1.0 - 0.05 * (age - 17.0) - 0.25 * (educ - 10.0) + 1.2 * black * u74
                    - 2.0e-4 * (re74 + re75)
                    - 0.5 * married
                    + 0.3 * hispanic;
                let p = 1.0 / (1.0 + (-logit).exp());
                let treat = f64::from(rng.random::<f64>() < p);
                let noise: f64 = rng.sample(StandardNormal);
                let re78 = (1500.0 * treat + 0.4 * re75 + 300.0 * (educ - 10.0) + 3000.0 * noise.abs()).max(0.0);
                w.write_record([treat, age, educ, black, hispanic, married, nodegree, re74, re75, re78].map(fmt_f64))?;
            }
            Ok(())
        },
    )
}
