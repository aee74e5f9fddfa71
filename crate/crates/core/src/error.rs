use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("unknown level `{0}`")]
    UnknownLevel(String),
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("preprocessing error: {0}")]
    Preprocess(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("training diverged: non-finite {0}")]
    Divergence(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("missing array `{0}`")]
    MissingArray(String),
    #[error("degenerate region: {0}")]
    DegenerateRegion(String),
}
