use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("stereographic projection singular: point within {eps:e} of the excluded pole")]
    ProjectionSingular { eps: f64 },

    #[error("quadrature diverged: non-finite integrand value at node {node}")]
    QuadratureDiverged { node: usize },

    #[error("non-finite derivative encountered")]
    NonFiniteDerivative,

    #[error("spectral pair residual check failed: max |1 - lap(u) - K e^(2u)| = {max_residual:e}")]
    ResidualCheckFailed { max_residual: f64 },

    #[error("unknown prescriber `{0}`")]
    UnknownPrescriber(String),

    #[error("degenerate prescriber: integral of (2K)^2 below 1e-12")]
    DegeneratePrescriber,

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("training diverged: every batch of epoch {epoch} was non-finite")]
    TrainingDiverged { epoch: usize },

    #[error("constant field: Pearson correlation undefined")]
    ConstantField,

    #[error("mesh is disconnected: no path between vertices {from} and {to}")]
    DisconnectedMesh { from: usize, to: usize },

    #[error("all expansion coefficients are zero")]
    AllZero,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
