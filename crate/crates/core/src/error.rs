use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("invalid feeder: {0}")]
    InvalidFeeder(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("problem is infeasible")]
    Infeasible,
    #[error("problem is unbounded")]
    Unbounded,
    #[error("solver hit the iteration limit")]
    MaxIterations,
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("relaxation is not exact: {0}")]
    Inexact(String),
    #[error("sensitivity does not exist: null-space dx residual {0:.3e}")]
    NoSensitivity(f64),
    #[error("factorization failed after jitter escalation")]
    Factorization,
    #[error("power flow did not converge: {0}")]
    PowerFlow(String),
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("config: {0}")]
    Config(String),
    #[error("stage {stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Innermost error beneath any stage tags.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }

    pub fn is_config(&self) -> bool {
        matches!(self.root(), Error::Config(_) | Error::InvalidFeeder(_))
    }

    /// Optimization, factorization or power-flow failure.
    pub fn is_solver(&self) -> bool {
        matches!(
            self.root(),
            Error::Infeasible
                | Error::Unbounded
                | Error::MaxIterations
                | Error::Numerical(_)
                | Error::Inexact(_)
                | Error::NoSensitivity(_)
                | Error::Factorization
                | Error::PowerFlow(_)
        )
    }
}

/// Tags errors with the pipeline stage they came from.
pub trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T, E: Into<Error>> StageExt<T> for std::result::Result<T, E> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| match e.into() {
            e @ Error::Stage { .. } => e,
            e => Error::Stage { stage, source: Box::new(e) },
        })
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Dimension { what, expected, got });
    }
    Ok(())
}
