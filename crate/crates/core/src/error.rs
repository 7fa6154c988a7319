use thiserror::Error;

/// Errors raised by the estimation pipeline.
///
/// Variants split into input problems ([`Error::is_validation`]) and
/// failures that happen while computing on otherwise valid input.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("subject {subject}: {reason}")]
    InvalidSubject { subject: String, reason: String },

    #[error("duplicate subject id `{0}`")]
    DuplicateSubject(String),

    #[error("subject {subject} at t={t}: covariate `{name}` is not finite ({value})")]
    NonFiniteCovariate {
        subject: String,
        t: f64,
        name: String,
        value: f64,
    },

    #[error("missing covariate column `{0}`")]
    MissingCovariate(String),

    #[error("design matrix is rank deficient ({0})")]
    RankDeficient(String),

    #[error("too few subjects: need at least {needed}, have {have}")]
    TooFewSubjects { needed: usize, have: usize },

    #[error("no solution: {0}")]
    NoSolution(String),

    #[error("rejection sampling exceeded {0} attempts")]
    RejectionLimit(usize),

    #[error("config: {0}")]
    Config(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True when the error stems from malformed or inconsistent input rather
    /// than a numerical or I/O failure.
    pub fn is_validation(&self) -> bool {
        if let Error::Stage { source, .. } = self {
            return source.is_validation();
        }
        matches!(
            self,
            Error::InvalidInput(_)
                | Error::InvalidSubject { .. }
                | Error::DuplicateSubject(_)
                | Error::NonFiniteCovariate { .. }
                | Error::MissingCovariate(_)
                | Error::Config(_)
        )
    }
}

/// Attaches a pipeline stage name to errors.
pub trait StageContext<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageContext<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| Error::Stage { stage, source: Box::new(e) })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
