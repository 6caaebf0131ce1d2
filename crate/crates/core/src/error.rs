use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("composition {0:?} is not in the closed simplex")]
    InvalidComposition(Vec<f64>),

    #[error("composition {0:?} touches the simplex boundary")]
    BoundaryComposition(Vec<f64>),

    #[error("entropy variables must be finite, got {0:?}")]
    NonFiniteEntropyVars(Vec<f64>),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("reaction term {species} does not vanish on u_{species} = 0 (value {value:e})")]
    InvalidReaction { species: usize, value: f64 },

    #[error("sampler cannot honor margin {margin} with {components} components")]
    SamplerExhausted { margin: f64, components: usize },

    #[error("model `{0}` carries no reaction term")]
    MissingReaction(String),

    #[error("model `{0}` provides no factored reduced mobility")]
    MissingReducedMobility(String),

    #[error("model `{0}` has no improved positivity lemma")]
    WrongModel(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),

    #[error("Newton iteration diverged at step {step} (residual {residual:e} after {iterations} iterations)")]
    NewtonDiverged {
        step: usize,
        residual: f64,
        iterations: usize,
    },

    #[error("reference field touches the simplex boundary at cell {0}")]
    BoundaryReference(usize),

    #[error("relative-entropy series is degenerate (H(0) = {0:e})")]
    DegenerateSeries(f64),

    #[error("fine configuration does not refine the coarse one: {0}")]
    ConfigMismatch(String),
}
