//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{context}: size mismatch on {axis}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: &'static str,
        axis: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("tensor shape {shape:?} implies {expected} elements, data has {actual}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("tensor shape {shape:?} contains a zero dimension")]
    ZeroDim { shape: Vec<usize> },

    #[error("{context}: tensor rank {actual} where {expected} expected")]
    Rank {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("{context}: non-finite value {value} at flat index {index}")]
    NonFinite {
        context: &'static str,
        index: usize,
        value: f64,
    },

    #[error("{context}: output length would be {len}, need at least 1")]
    EmptyOutput { context: &'static str, len: isize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid quantization params: {0}")]
    InvalidQuantParams(String),

    #[error("{kernel}: i32 accumulator overflow at output index {index}")]
    AccumulatorOverflow { kernel: &'static str, index: usize },

    #[error("calibration stats '{name}' have no observations")]
    EmptyStats { name: String },

    #[error("percentile finalization requires histogram collection")]
    MissingHistogram,

    #[error("calibration dataset is empty")]
    EmptyDataset,

    #[error("missing quantization params for layer {layer}")]
    MissingLayerParams { layer: String },

    #[error("unknown layer name '{0}'")]
    UnknownLayer(String),

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("input too short: {t} frames, forward needs at least {min}")]
    InputTooShort { t: usize, min: usize },

    #[error("missing weight tensor '{0}'")]
    MissingTensor(String),

    #[error("zero-norm vector in cosine score")]
    ZeroNorm,

    #[error("cannot compute EER: no {class} trials")]
    EmptyClass { class: &'static str },

    #[error("unresolvable utterance id '{0}'")]
    UnknownUtterance(String),

    #[error("cannot build trials: {0}")]
    TrialSampling(String),

    #[error("{path}: bad magic, expected {expected:?}")]
    BadMagic { path: PathBuf, expected: &'static str },

    #[error("{path}: file truncated ({detail})")]
    Truncated { path: PathBuf, detail: String },

    #[error("{path}: unsupported format version {version}")]
    BadVersion { path: PathBuf, version: u16 },

    #[error("{path}: feature dim {actual} does not match {expected} from earlier files")]
    FeatDimMismatch {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },

    #[error("no feature files found under {0}")]
    NoFeatureFiles(PathBuf),

    #[error("{path}:{line}: parse error: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
