use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed array header: {0}")]
    MalformedHeader(String),

    #[error("unsupported dtype {0:?} (expected '<f4' or '<i4')")]
    DtypeUnsupported(String),

    #[error("fortran-ordered arrays are not supported")]
    FortranOrder,

    #[error("array contains non-finite values")]
    NonFinite,

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("input has an empty extent")]
    EmptyInput,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("bundle manifest missing at {0}")]
    ManifestMissing(PathBuf),

    #[error("malformed manifest: {0}")]
    ManifestInvalid(String),

    #[error("gradient shape mismatch for class {class_id} layer {layer}: grad {grad:?} vs features {features:?}")]
    GradShapeMismatch {
        layer: String,
        class_id: i32,
        grad: Vec<usize>,
        features: Vec<usize>,
    },

    #[error("layers are not ordered deep to shallow: {deeper} {deeper_hw:?} is larger than {shallower} {shallower_hw:?}")]
    NonMonotoneLayers {
        deeper: String,
        deeper_hw: (usize, usize),
        shallower: String,
        shallower_hw: (usize, usize),
    },

    #[error("bundle directory {0} already exists (pass force to overwrite)")]
    AlreadyExists(PathBuf),

    #[error("unknown class {0}")]
    UnknownClass(i32),

    #[error("unknown layer {0:?}")]
    UnknownLayer(String),

    #[error("invalid class id {0} (must be >= 1; 0 is background)")]
    InvalidClassId(i32),

    #[error("empty SIM stack")]
    EmptyStack,

    #[error("empty SIP cascade")]
    EmptyCascade,

    #[error("class {0} has no GAP weights")]
    MissingGapWeights(i32),

    #[error("too few points for clustering: {points} points, {clusters} clusters")]
    TooFewPoints { points: usize, clusters: usize },

    #[error("degenerate clustering input: every point is the zero vector")]
    DegenerateInput,

    #[error("no class maps supplied")]
    EmptyClassSet,

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: i32, num_classes: usize },

    #[error("mask has no set pixels")]
    EmptyMask,

    #[error("no localization records")]
    EmptyRecords,

    #[error("empty threshold grid")]
    EmptyGrid,

    #[error("value {value} for {what} outside [0, 1]")]
    OutOfUnitRange { what: &'static str, value: f64 },

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
