use thiserror::Error;

/// Coarse grouping of errors, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorFamily {
    Io,
    Schema,
    Estimation,
    Numerical,
    Config,
}

impl ErrorFamily {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorFamily::Io => 1,
            ErrorFamily::Schema => 2,
            ErrorFamily::Estimation => 3,
            ErrorFamily::Numerical => 4,
            ErrorFamily::Config => 5,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("empty effective sample: {0}")]
    EmptyEffectiveSample(String),

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("schema error in column `{column}`{}: {message}", row_suffix(*.row))]
    SchemaError {
        column: String,
        row: Option<usize>,
        message: String,
    },

    #[error("invalid value in row {row}, column `{column}`: {message}")]
    ValueError {
        row: usize,
        column: String,
        message: String,
    },

    #[error("treatment indicator at index {index} is {value}, expected 0 or 1")]
    NonBinaryTreatment { index: usize, value: f64 },

    #[error("propensity score at index {index} is {value}, expected a value in (0, 1)")]
    ScoreOutOfRange { index: usize, value: f64 },

    #[error("singular Hessian at Newton iteration {iteration}; the design is collinear")]
    SingularHessian { iteration: usize },

    #[error("insufficient data: need {needed}, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("non-positive value {value} at index {index}")]
    NonPositiveValue { index: usize, value: f64 },

    #[error("degenerate CDF: {0}")]
    DegenerateCdf(String),

    #[error("degenerate tail: {0}")]
    DegenerateTail(String),

    #[error("theta must be strictly positive in the intermediate regime")]
    ThetaRequiredPositive,

    #[error("quadrature failed to reach tolerance {tolerance:e} (estimated error {estimate:e})")]
    QuadratureFailure { tolerance: f64, estimate: f64 },

    #[error("intermediate regime violated: n * tau_n = {product} < {floor}")]
    IntermediateRegimeViolated { product: f64, floor: f64 },

    #[error("invalid limit-law spec: {0}")]
    InvalidSpec(String),

    #[error("balance constant must be positive (or infinite), got {0}")]
    InvalidBalanceConstant(f64),

    #[error("sample size {0} too small for subsampling (need n >= 3)")]
    TooSmall(usize),

    #[error("only {got} successful replicates, need at least {needed}")]
    InsufficientReplicates { got: usize, needed: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn row_suffix(row: Option<usize>) -> String {
    match row {
        Some(r) => format!(" (row {r})"),
        None => String::new(),
    }
}

impl Error {
    pub fn family(&self) -> ErrorFamily {
        use Error::*;
        match self {
            Io(_) => ErrorFamily::Io,
            MissingColumn(_)
            | SchemaError { .. }
            | ValueError { .. }
            | Csv(_)
            | NonBinaryTreatment { .. }
            | ScoreOutOfRange { .. } => ErrorFamily::Schema,
            EmptyEffectiveSample(_)
            | IntermediateRegimeViolated { .. }
            | InsufficientData { .. }
            | NonPositiveValue { .. }
            | DegenerateTail(_)
            | InsufficientReplicates { .. }
            | TooSmall(_) => ErrorFamily::Estimation,
            SingularHessian { .. } | DegenerateCdf(_) | QuadratureFailure { .. } => ErrorFamily::Numerical,
            InvalidParameter { .. }
            | ThetaRequiredPositive
            | InvalidSpec(_)
            | InvalidBalanceConstant(_)
            | Config(_)
            | Json(_) => ErrorFamily::Config,
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.family().exit_code()
    }

    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Validates a probability level strictly inside (0, 1).
pub(crate) fn check_probability(name: &'static str, p: f64) -> Result<f64> {
    if p > 0.0 && p < 1.0 {
        Ok(p)
    } else {
        Err(Error::param(name, format!("{p} is not in (0, 1)")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_families() {
        assert_eq!(Error::MissingColumn("y".into()).exit_code(), 2);
        assert_eq!(Error::EmptyEffectiveSample("x".into()).exit_code(), 3);
        assert_eq!(Error::SingularHessian { iteration: 0 }.exit_code(), 4);
        assert_eq!(Error::Config("x".into()).exit_code(), 5);
    }

    #[test]
    fn schema_error_mentions_row() {
        let e = Error::SchemaError {
            column: "d".into(),
            row: Some(7),
            message: "bad".into(),
        };
        assert!(e.to_string().contains("row 7"));
    }
}
