use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?} for {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },

    #[error("loss must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("variable {0} was not recorded on this tape")]
    UnknownVariable(usize),

    #[error("no backward pass has been run on this tape")]
    NoBackward,

    #[error("parameter {0} has no gradient")]
    MissingGrad(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("timestep {t} outside schedule range 0..={max}")]
    TimestepOutOfRange { t: usize, max: usize },

    #[error("empty dataset")]
    EmptyData,

    #[error("loss diverged (non-finite) at {stage} {index}")]
    Diverged { stage: &'static str, index: usize },

    #[error("class {class} has no samples")]
    EmptyClass { class: usize },

    #[error("unbalanced classes: counts {0:?}")]
    Unbalanced(Vec<usize>),

    #[error("degenerate vector: {0}")]
    Degenerate(String),

    #[error("frozen parameter changed: {0}")]
    FrozenViolation(String),

    #[error("fingerprint mismatch for {path}: recorded {recorded}, found {found}")]
    FingerprintMismatch {
        path: String,
        recorded: String,
        found: String,
    },

    #[error("missing artifact {0}")]
    MissingArtifact(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
