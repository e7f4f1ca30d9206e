use thiserror::Error;

/// Errors surfaced by grid, measure, model, region and solver operations.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid measure: {0}")]
    InvalidMeasure(String),

    #[error("measures live on different grids")]
    GridMismatch,

    #[error("transport inputs carry unequal total mass ({total_a} vs {total_b})")]
    UnbalancedTransport { total_a: f64, total_b: f64 },

    #[error("domain error: {0}")]
    DomainError(String),

    #[error("invalid density: {0}")]
    InvalidDensity(String),

    #[error("extension base is empty")]
    EmptyExtensionBase,

    #[error("model density vanishes on the base grid; log-density unbounded")]
    UnboundedLogDensity,

    #[error("posterior undefined: marginal mass at sample index {x} is zero")]
    PosteriorUndefined { x: usize },

    #[error("parameter violation: {0}")]
    ParameterViolation(String),

    #[error("credibility deficit: field integrates to {credibility} < required {required}")]
    CredibilityDeficit { credibility: f64, required: f64 },

    #[error("degenerate prior update: {0}")]
    DegenerateUpdate(String),

    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
