use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("domain error: {0}")]
    Domain(String),

    /// The rate matrix has more than one closed class, so the stationary
    /// state depends on where the system started.
    #[error("steady state is not unique: {0}")]
    NonConvergence(String),

    #[error("step size error: {0}")]
    StepSize(String),

    #[error("fit failed: {0}")]
    Fit(String),

    #[error("no measurable decay: {0}")]
    NoDecay(String),

    #[error("occupancy target unreachable: {0}")]
    TargetUnreachable(String),

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("numerical underflow at bin {bin}")]
    NumericalUnderflow { bin: usize },

    #[error("singular jacobian: {0}")]
    SingularJacobian(String),

    #[error("spectrum vanished after subtraction")]
    AllZero,

    #[error("reference spectra are linearly dependent")]
    SingularBasis,

    #[error("window [{lo}, {hi}] nm does not overlap the grid")]
    EmptyWindow { lo: f64, hi: f64 },

    #[error("too few photons: {got} < {need}")]
    TooFewPhotons { got: usize, need: usize },

    #[error("schema error at line {line}, column {column}: {msg}")]
    Schema {
        line: u64,
        column: u64,
        msg: String,
    },

    #[error("scenario failed in stage `{stage}`: {source}")]
    ScenarioFailure {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn schema(line: u64, column: u64, msg: impl Into<String>) -> Self {
        Error::Schema {
            line,
            column,
            msg: msg.into(),
        }
    }

    pub(crate) fn in_stage(self, stage: &str) -> Self {
        match self {
            e @ Error::ScenarioFailure { .. } => e,
            e => Error::ScenarioFailure {
                stage: stage.to_string(),
                source: Box::new(e),
            },
        }
    }
}
