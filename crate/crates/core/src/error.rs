use thiserror::Error;

pub type Result<T> = std::result::Result<T, PmqError>;

#[derive(Debug, Error)]
pub enum PmqError {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("matrix is not positive definite: non-positive pivot at index {pivot}")]
    Singular { pivot: usize },

    #[error("cholesky failed after damping (pivot {pivot}); try a larger percdamp")]
    DampedSingular { pivot: usize },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("index {index} out of range 0..{len}")]
    OutOfRange { index: usize, len: usize },

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("dtype mismatch for tensor `{name}`: expected {expected}, found {found}")]
    DtypeMismatch {
        name: String,
        expected: String,
        found: String,
    },

    #[error("truncated payload: {0}")]
    TruncatedPayload(String),

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("packed payload length mismatch: expected {expected} bytes, found {found}")]
    PayloadLength { expected: usize, found: usize },

    #[error("brute-force search space of {0} assignments exceeds the limit")]
    SearchSpaceOverflow(u128),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("layer `{layer}`: {source}")]
    Layer {
        layer: String,
        #[source]
        source: Box<PmqError>,
    },

    #[error(
        "trajectory drift at layer `{0}`: realized weights changed after activation collection"
    )]
    TrajectoryDrift(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl PmqError {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        PmqError::Shape {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn in_layer(self, layer: &str) -> Self {
        PmqError::Layer {
            layer: layer.to_string(),
            source: Box::new(self),
        }
    }

    /// True for failures of the numerics (singular systems, non-finite values),
    /// as opposed to I/O, parsing, or configuration problems.
    pub fn is_numeric(&self) -> bool {
        match self {
            PmqError::Singular { .. }
            | PmqError::DampedSingular { .. }
            | PmqError::NonFinite(_)
            | PmqError::SearchSpaceOverflow(_)
            | PmqError::TrajectoryDrift(_) => true,
            PmqError::Layer { source, .. } => source.is_numeric(),
            _ => false,
        }
    }

    pub fn is_io(&self) -> bool {
        match self {
            PmqError::Io(_)
            | PmqError::MalformedHeader(_)
            | PmqError::DtypeMismatch { .. }
            | PmqError::TruncatedPayload(_)
            | PmqError::MissingTensor(_)
            | PmqError::Manifest(_)
            | PmqError::PayloadLength { .. }
            | PmqError::Json(_) => true,
            PmqError::Layer { source, .. } => source.is_io(),
            _ => false,
        }
    }
}
