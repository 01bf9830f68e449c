use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("model error: {0}")]
    Model(String),

    #[error("non-finite value from coefficient `{coefficient}` at t={t}, x={x:?}, regime={regime}")]
    NonFiniteCoefficient {
        coefficient: &'static str,
        t: f64,
        x: Vec<f64>,
        regime: usize,
    },

    #[error("simulation configuration error: {0}")]
    Simulation(String),

    #[error("thinning step too coarse: dt * dominating rate = {product:.6} > 1 (max admissible dt = {max_dt:.6e})")]
    ThinningTooCoarse { product: f64, max_dt: f64 },

    #[error("chain build error: {0}")]
    Chain(String),

    #[error(
        "negative stencil probability at node {node}, regime {regime}: \
         dt = {dt:.6e} exceeds max admissible dt = {max_dt:.6e}"
    )]
    StencilInfeasible {
        node: usize,
        regime: usize,
        dt: f64,
        max_dt: f64,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("obstacle ordering assumption (M.2.ii) violated ({what}) at {count} node(s), first at t={t}, x={x}, regime={regime}")]
    ObstacleOrdering {
        what: String,
        count: usize,
        t: f64,
        x: f64,
        regime: usize,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("solver error: {0}")]
    Solve(String),

    #[error("explicit step unjustified: dt * Lipschitz = {product:.6} >= 1")]
    ExplicitStepUnstable { product: f64 },

    #[error("adjoint precondition violated: {0}")]
    AdjointPrecondition(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
