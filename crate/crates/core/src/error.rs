use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("riccati iteration for {model} did not converge after {iterations} iterations (last change {last_change:e})")]
    DareNotConverged {
        model: String,
        iterations: usize,
        last_change: f64,
    },

    #[error("closed-loop gain for {model} is not stabilizing (spectral radius {radius})")]
    NotStabilizing { model: String, radius: f64 },

    #[error("solver failure: {0}")]
    Solver(String),

    #[error("episode {seed} failed at step {step}: {source}")]
    Episode {
        seed: u64,
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("test set was built for config {expected}, current config hashes to {got}")]
    ConfigHashMismatch { expected: String, got: String },

    #[error("training diverged after {episodes} episodes")]
    Diverged { episodes: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
