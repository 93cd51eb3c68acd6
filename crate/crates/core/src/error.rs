use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse failure class, used by the command-line front end to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    // corpus
    #[error("manifest {0}: missing column `{1}`")]
    MissingColumn(PathBuf, String),
    #[error("manifest {path}: unknown partition `{value}` on line {line}")]
    UnknownPartition {
        path: PathBuf,
        line: usize,
        value: String,
    },
    #[error("corpus {corpus}: duplicate sample id `{sample_id}`")]
    DuplicateSampleId { corpus: String, sample_id: String },
    #[error("manifest {0} has no records")]
    EmptyManifest(PathBuf),
    #[error("manifest {path}: {message}")]
    MalformedManifest { path: PathBuf, message: String },
    #[error("label `{0}` has no arousal/valence mapping")]
    UnmappedLabel(String),
    #[error("partition `{0}` is empty")]
    EmptyPartition(String),

    // dsp
    #[error("{0}: not a RIFF/WAVE file")]
    NotWav(PathBuf),
    #[error("{path}: unsupported encoding ({detail})")]
    UnsupportedEncoding { path: PathBuf, detail: String },
    #[error("{0}: no audio samples")]
    EmptyAudio(PathBuf),
    #[error("cannot pad an empty batch")]
    EmptyBatch,
    #[error("malformed MELS file {path}: {message}")]
    BadMelFile { path: PathBuf, message: String },

    // compute
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("attention mask leaves no valid position for batch item {0}")]
    AllMasked(usize),

    // model
    #[error("domain `{0}` registered twice")]
    DuplicateDomain(String),
    #[error("unknown domain `{0}`")]
    UnknownDomain(String),
    #[error("unknown training regime `{0}`")]
    UnknownRegime(String),
    #[error("corrupt checkpoint {path}: {message}")]
    CorruptCheckpoint { path: PathBuf, message: String },
    #[error("checkpoint {path} has format version {found}, expected {expected}")]
    VersionMismatch {
        path: PathBuf,
        found: u32,
        expected: u32,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    // trainer
    #[error("loss diverged at step {step} (lr {lr}): {detail}")]
    DivergedLoss { step: u64, lr: f64, detail: String },
    #[error("categorical round-robin training needs at least two corpora")]
    SingleDomainCategorical,

    // eval
    #[error("confusion matrix has no reference samples")]
    EmptyMatrix,
    #[error("prediction lists differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("runs are not aligned: {0}")]
    MisalignedRuns(String),

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("csv error in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidConfig(_) | Error::UnknownRegime(_) => ErrorKind::Usage,
            Error::DivergedLoss { .. }
            | Error::ShapeMismatch { .. }
            | Error::AllMasked(_)
            | Error::LabelOutOfRange { .. } => ErrorKind::Numeric,
            _ => ErrorKind::Data,
        }
    }
}
