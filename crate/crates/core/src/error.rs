use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("image `{stem}` in class `{class}` has no mask file")]
    MissingMask { class: String, stem: String },
    #[error("class directory `{class}` contains no image/mask pairs")]
    EmptyClass { class: String },
    #[error("cannot decode image {path}: {reason}")]
    CorruptImage { path: PathBuf, reason: String },
    #[error("dataset root {0} does not exist or is not a directory")]
    MissingRoot(PathBuf),
    #[error("duplicate class identifier `{0}`")]
    DuplicateClass(String),
    #[error("requested {requested} classes but only {available} shape classes exist")]
    UnsupportedClassCount { requested: usize, available: usize },
    #[error(
        "class split leaves one side empty ({n_classes} classes, test fraction {test_fraction})"
    )]
    DegenerateSplit {
        n_classes: usize,
        test_fraction: f64,
    },
    #[error("class `{class}` has {available} entries, episode needs {required}")]
    InsufficientEntries {
        class: String,
        available: usize,
        required: usize,
    },
    #[error("unlabeled images requested but no unlabeled pool is configured or it is empty")]
    EmptyUnlabeledPool,
    #[error("non-empty mask vanished when downsampled to {height}x{width}")]
    EmptyAfterDownsample { height: usize, width: usize },
    #[error("noise sigma must be non-negative, got {0}")]
    NegativeSigma(f64),
    #[error("input {height}x{width} is not divisible by the encoder stride {stride}")]
    IndivisibleInput {
        height: usize,
        width: usize,
        stride: usize,
    },
    #[error("mask has no foreground pixels at feature resolution")]
    EmptyMask,
    #[error("cannot aggregate prototypes of different classes")]
    MixedClasses,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("values outside [0, 1]: {0}")]
    RangeViolation(String),
    #[error("mask contains values other than 0 and 1")]
    NonBinaryInput,
    #[error("lambda must be non-negative, got {0}")]
    NegativeLambda(f64),
    #[error("gave up after {0} consecutive episodes with empty support masks")]
    ExhaustedResampling(usize),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("invalid configuration key `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("no space left on device while writing {0}")]
    DiskFull(PathBuf),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::StorageFull {
            return Error::DiskFull(path);
        }
        Error::Io { path, source }
    }

    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by invalid user input rather than runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config { .. } | Error::NegativeLambda(_) | Error::NegativeSigma(_)
        )
    }
}
