use alloc::string::String;

/// Errors produced by the analysis and steering routines.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid token layout: {0}")]
    InvalidLayout(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite or negative attention entry {value} at step {step}, layer {layer}, head {head}, token {token}")]
    InvalidEntry {
        step: usize,
        layer: usize,
        head: usize,
        token: usize,
        value: f32,
    },

    #[error("attention row at step {step}, layer {layer}, head {head} sums to {sum}, expected 1")]
    RowSum {
        step: usize,
        layer: usize,
        head: usize,
        sum: f64,
    },

    #[error("{what} index {index} out of range (len {len})")]
    OutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("layout has no image grid")]
    NoGrid,

    #[error("bounding box {0:?} is empty or outside the image")]
    InvalidBox([u32; 4]),

    #[error("region mask is empty")]
    EmptyRegion,

    #[error("token {0} is not a visual token")]
    NotVisual(usize),

    #[error("zero attention mass on {0}")]
    ZeroMass(&'static str),

    #[error("every head in layer {0} has an undefined metric")]
    UndefinedLayer(usize),

    #[error("not enough data: {0}")]
    InsufficientData(String),

    #[error("degenerate regression: zero variance")]
    DegenerateFit,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("vision head set is empty")]
    EmptyVisionHeads,

    #[error("layouts differ between inputs")]
    LayoutMismatch,

    #[error("infeasible synthetic spec: {0}")]
    InfeasibleSpec(String),

    #[error("training diverged at step {0}")]
    Divergence(usize),
}

pub type Result<T> = core::result::Result<T, Error>;
