use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid episode spec: {0}")]
    InvalidSpec(String),
    #[error("dataset too small for N-way: need {needed} classes, have {available}")]
    TooFewClasses { needed: usize, available: usize },
    #[error("class too small for K+Q: class `{class}` has {available} examples, need {needed}")]
    ClassTooSmall {
        class: String,
        needed: usize,
        available: usize,
    },
    #[error("degenerate episode: class id {0} appears more than once")]
    DegenerateEpisode(String),

    #[error("missing class directories under {root}: {missing:?}")]
    MissingClasses { root: PathBuf, missing: Vec<String> },
    #[error("cannot decode image {path}: {reason}")]
    Decode { path: PathBuf, reason: String },
    #[error("invalid split manifest: {0}")]
    Manifest(String),
    #[error("separation infeasible: could not place {n_classes} prototypes {separation} apart after {attempts} draws")]
    SeparationInfeasible {
        n_classes: usize,
        separation: f64,
        attempts: usize,
    },

    #[error("shape mismatch in {context}: expected {expected:?}, received {received:?}")]
    Shape {
        context: String,
        expected: Vec<usize>,
        received: Vec<usize>,
    },
    #[error("relation network overflow in layer {layer}")]
    RelationOverflow { layer: usize },
    #[error("similarity overflow")]
    SimilarityOverflow,
    #[error("m too large for episode: m = {m}, episode has {n_nodes} nodes")]
    NeighborsTooLarge { m: usize, n_nodes: usize },
    #[error("propagation singular (condition estimate {condition:e})")]
    PropagationSingular { condition: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("divergence at episode {episode}")]
    Divergence { episode: u64 },

    #[error("checkpoint format version mismatch: file has version {found}, this build reads version {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("gradient check failed: max relative error {max_rel_error:e} exceeds {tolerance:e} at {offending:?}")]
    GradCheck {
        max_rel_error: f64,
        tolerance: f64,
        offending: Vec<String>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
