use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse grouping of errors, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorFamily {
    Config,
    Data,
    Convergence,
    Io,
    Internal,
}

impl ErrorFamily {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorFamily::Config => 2,
            ErrorFamily::Data => 3,
            ErrorFamily::Convergence => 4,
            ErrorFamily::Io => 5,
            ErrorFamily::Internal => 70,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("unknown layer kind tag {0}")]
    UnknownLayerKind(u8),
    #[error("loss must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("missing gradient for trainable parameter (layer position {layer}, {slot})")]
    MissingGradient { layer: usize, slot: &'static str },
    #[error("layer index {index} out of range 1..={max}")]
    IndexOutOfRange { index: usize, max: usize },
    #[error("model has no fully-connected classification head")]
    NoClassificationHead,
    #[error("head snapshot expects {expected} inputs but model provides {actual}")]
    SnapshotShapeMismatch { expected: usize, actual: usize },
    #[error("invalid frozen-layer count {k}: must be at most {max}")]
    InvalidFrozenCount { k: usize, max: usize },
    #[error("pruning fraction {0} outside [0, 1]")]
    FractionOutOfRange(f64),
    #[error("blur kernel size must be odd and positive, got {0}")]
    EvenKernelSize(usize),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("mask is not binary (element {index} = {value})")]
    NonBinaryMask { index: usize, value: f64 },
    #[error("mask selects no pixels")]
    EmptyMask,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}: bad magic {found:#x}, expected {expected:#x}")]
    BadIdxMagic {
        path: PathBuf,
        found: u32,
        expected: u32,
    },
    #[error("{0}: truncated file")]
    TruncatedFile(PathBuf),
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("requested {requested} samples of class {class} but only {available} are available")]
    InsufficientTargetSamples {
        class: usize,
        requested: usize,
        available: usize,
    },
    #[error("failed to load data from {path}: {source}")]
    DataLoad {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic in container file")]
    BadMagic,
    #[error("unsupported container version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    ChecksumMismatch { stored: u64, computed: u64 },
    #[error("malformed container: {0}")]
    Malformed(String),

    #[error("{stage}: training did not converge ({detail})")]
    NonConvergence { stage: String, detail: String },
    #[error(
        "trigger objective did not decrease enough: initial {initial:.6}, final {final_value:.6}"
    )]
    ObjectiveNotDecreasing { initial: f64, final_value: f64 },
    #[error("feature gap {gap:.6} exceeds threshold {threshold:.6}")]
    FeatureGapTooLarge { gap: f64, threshold: f64 },

    #[error("config error: {0}")]
    Config(String),
    #[error("{stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn family(&self) -> ErrorFamily {
        use Error::*;
        match self {
            Config(_) | InvalidFrozenCount { .. } | FractionOutOfRange(_) | EvenKernelSize(_) => {
                ErrorFamily::Config
            }
            BadIdxMagic { .. }
            | TruncatedFile(_)
            | CountMismatch { .. }
            | InsufficientTargetSamples { .. }
            | DataLoad { .. }
            | LabelOutOfRange { .. } => ErrorFamily::Data,
            NonConvergence { .. } | ObjectiveNotDecreasing { .. } | FeatureGapTooLarge { .. } => {
                ErrorFamily::Convergence
            }
            Io(_)
            | File { .. }
            | Csv(_)
            | Json(_)
            | BadMagic
            | VersionMismatch { .. }
            | ChecksumMismatch { .. }
            | Malformed(_) => ErrorFamily::Io,
            Stage { source, .. } => source.family(),
            _ => ErrorFamily::Internal,
        }
    }

    /// Attach a pipeline stage name.
    pub fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
