use std::io;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("input shape mismatch: expected {expected:?}, got {got:?}")]
    Shape { expected: Vec<usize>, got: Vec<usize> },

    #[error("invalid network: {0}")]
    Network(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Divergence { epoch: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("policy does not match network at layers {layers:?}")]
    PolicyMismatch { layers: Vec<usize> },

    #[error("invalid policy: {0}")]
    Policy(String),

    #[error("budget unsatisfiable: minimum achievable cost is {min_cost} BOPs")]
    Unsatisfiable { min_cost: u128 },

    #[error("certification cache has no entry for input {input_id}")]
    CacheMiss { input_id: usize },

    #[error("no open episode")]
    NoOpenEpisode,

    #[error("config error: {0}")]
    Config(String),

    #[error("{0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}
