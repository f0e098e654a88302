use thiserror::Error;
use un2clip_autograd::AutogradError;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid attributes: {0}")]
    InvalidAttributes(String),
    #[error("unreachable marginals: {0}")]
    UnreachableMarginals(String),
    #[error("out-of-vocabulary word(s): {0}")]
    OutOfVocabulary(String),
    #[error("caption does not match the grammar: {0}")]
    Grammar(String),
    #[error("corpus file: {0}")]
    CorpusFormat(String),
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("timestep {t} out of range 1..={max}")]
    Timestep { t: usize, max: usize },
    #[error("training diverged at {stage} step {step}: loss {loss}")]
    Diverged {
        stage: &'static str,
        step: usize,
        loss: f64,
    },
    #[error("invariant violated: {0}")]
    InvariantViolation(String),
    #[error("noise bank: {0}")]
    NoiseBank(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint digest mismatch (file truncated or corrupted)")]
    DigestMismatch,
    #[error("checkpoint format version {found} is newer than supported version {supported}")]
    VersionAhead { found: u32, supported: u32 },
    #[error("checkpoint holds a {found} model, expected {expected}")]
    KindMismatch { expected: String, found: String },
    #[error("config: {0}")]
    Config(String),
    #[error("image: {0}")]
    Image(String),
    #[error("evaluation: {0}")]
    Eval(String),
    #[error("report: {0}")]
    Report(String),
}

pub type Result<T> = std::result::Result<T, CoreError>;

impl CoreError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
