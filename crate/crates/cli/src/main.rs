use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ipw_quantile::cli_io::{
    run_command, Command, ExperimentKind, FixtureConfig, GammaSource, RunConfig, Schema, ScoreSource, SimulationConfig,
    Statistic,
};
use ipw_quantile::estimators::TruncationScale;
use ipw_quantile::limit_law::LimitSpec;
use ipw_quantile::propensity::Arm;
use ipw_quantile::sim_lab::{DgpSpec, ScoreMode};
use ipw_quantile::{Error, ErrorFamily};
use serde::de::DeserializeOwned;

/// Truncated IPW quantile estimation under limited overlap.
#[derive(Parser)]
#[command(name = "ipwq", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a JSON configuration file.
    Run { config: PathBuf },
    /// Quantile treatment effects at the given levels.
    Estimate(Common),
    /// Estimates along a grid of truncation constants.
    Sweep(Common),
    /// Hill curve and minimum-distance tail index per arm.
    Tail(Common),
    /// Subsampling distribution and intervals.
    Subsample(Common),
    /// Monte-Carlo experiments on synthetic designs.
    Simulate(Common),
    /// Draws and characteristic functions of the limit laws.
    Limitlaw(Common),
    /// Writes a synthetic dataset.
    Fixture(Common),
}

/// Enum values use their JSON spelling.
fn json_enum<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn gamma_arg(s: &str) -> Result<GammaSource, String> {
    match s {
        "hill" | "hill-mindist" => Ok(GammaSource::HillMindist),
        _ => {
            if let Some(k) = s.strip_prefix("hill-k:") {
                k.parse().map(GammaSource::HillAtK).map_err(|e| format!("{e}"))
            } else {
                s.parse()
                    .map(GammaSource::Fixed)
                    .map_err(|_| format!("`{s}` is not a number, `hill` or `hill-k:K`"))
            }
        }
    }
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    input: Option<PathBuf>,
    /// auto, nsw or generic.
    #[arg(long, value_parser = json_enum::<Schema>, default_value = "auto")]
    schema: Schema,
    /// column, logistic or true.
    #[arg(long, value_parser = json_enum::<ScoreSource>, default_value = "column")]
    scores: ScoreSource,
    #[arg(long = "tau", num_args = 1.., value_delimiter = ',')]
    taus: Vec<f64>,
    #[arg(long)]
    theta: Option<f64>,
    #[arg(long = "c-grid", num_args = 1.., value_delimiter = ',')]
    c_grid: Option<Vec<f64>>,
    /// inverse_gamma (b_n = C n^{-1/gamma}) or gamma (b_n = C n^{-gamma}).
    #[arg(long, value_parser = json_enum::<TruncationScale>, default_value = "inverse_gamma")]
    scale: TruncationScale,
    /// A number, `hill` or `hill-k:K`.
    #[arg(long, value_parser = gamma_arg)]
    gamma: Option<GammaSource>,
    #[arg(long, value_parser = json_enum::<Arm>)]
    arm: Option<Arm>,
    /// qte, treated or control.
    #[arg(long, value_parser = json_enum::<Statistic>, default_value = "qte")]
    statistic: Statistic,
    #[arg(long)]
    b: Option<usize>,
    #[arg(long)]
    n_b: Option<usize>,
    #[arg(long)]
    replacement: bool,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[arg(long)]
    preset: Option<String>,
    /// JSON file with a design specification.
    #[arg(long)]
    dgp: Option<PathBuf>,
    /// mse, rate or drift.
    #[arg(long, value_parser = json_enum::<ExperimentKind>, default_value = "mse")]
    experiment: ExperimentKind,
    #[arg(long = "n", num_args = 1.., value_delimiter = ',')]
    n_grid: Vec<usize>,
    #[arg(long)]
    replications: Option<usize>,
    /// true or logistic.
    #[arg(long, value_parser = json_enum::<ScoreMode>, default_value = "true")]
    score_mode: ScoreMode,
    #[arg(long, default_value_t = 0.0)]
    b_n: f64,
    /// JSON file with a limit-law specification.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    draws: Option<usize>,
    /// Fixture kind: nsw or dgp.
    #[arg(long, default_value = "nsw")]
    kind: String,
}

fn read(path: &PathBuf) -> Result<String, Error> {
    Ok(std::fs::read_to_string(path)?)
}

fn build(command: Command, c: Common) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::new(command, c.seed, c.out);
    cfg.input = c.input;
    cfg.schema = c.schema;
    cfg.score_source = c.scores;
    cfg.taus = c.taus;
    cfg.theta = c.theta;
    cfg.c_grid = c.c_grid;
    cfg.truncation_scale = c.scale;
    cfg.gamma = c.gamma;
    cfg.arm = c.arm;
    cfg.statistic = c.statistic;
    cfg.b = c.b;
    cfg.n_b = c.n_b;
    cfg.replacement = c.replacement;
    cfg.level = c.level;
    cfg.draws = c.draws;
    let dgp: Option<DgpSpec> = match &c.dgp {
        Some(p) => Some(serde_json::from_str(&read(p)?)?),
        None => None,
    };
    match command {
        Command::Simulate => {
            cfg.simulation = Some(SimulationConfig {
                preset: c.preset,
                dgp,
                experiment: c.experiment,
                n_grid: c.n_grid,
                replications: c.replications,
                score_mode: c.score_mode,
                b_n: c.b_n,
                u_grid: None,
            })
        }
        Command::Limitlaw => {
            let path = c.spec.ok_or_else(|| Error::Config("limitlaw needs --spec".into()))?;
            cfg.limit = Some(LimitSpec::from_json(&read(&path)?)?);
        }
        Command::Fixture => {
            let n = *c
                .n_grid
                .first()
                .ok_or_else(|| Error::Config("fixture needs --n".into()))?;
            cfg.fixture = Some(match c.kind.as_str() {
                "nsw" => FixtureConfig::Nsw { n },
                "dgp" => FixtureConfig::Dgp {
                    dgp: dgp.ok_or_else(|| Error::Config("dgp fixture needs --dgp".into()))?,
                    n,
                },
                other => return Err(Error::Config(format!("unknown fixture kind `{other}`"))),
            });
        }
        _ => {}
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Error> {
    let cfg = match cli.command {
        Cmd::Run { config } => RunConfig::from_json(&read(&config)?)?,
        Cmd::Estimate(c) => build(Command::Estimate, c)?,
        Cmd::Sweep(c) => build(Command::Sweep, c)?,
        Cmd::Tail(c) => build(Command::Tail, c)?,
        Cmd::Subsample(c) => build(Command::Subsample, c)?,
        Cmd::Simulate(c) => build(Command::Simulate, c)?,
        Cmd::Limitlaw(c) => build(Command::Limitlaw, c)?,
        Cmd::Fixture(c) => build(Command::Fixture, c)?,
    };
    let manifest = run_command(&cfg)?;
    for w in &manifest.warnings {
        eprintln!("warning: {w}");
    }
    for o in &manifest.outputs {
        println!("{}\t{}", cfg.output_dir.join(&o.file).display(), o.sha256);
    }
    println!("{}", cfg.output_dir.join("manifest.json").display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() {
                ErrorFamily::Config.exit_code()
            } else {
                0
            };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
