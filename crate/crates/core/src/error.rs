use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("computation error: {message} (inputs: {inputs})")]
    Computation { message: String, inputs: String },

    #[error("infeasible: target {target} is not reachable; the achievable limit is {asymptote:.6}")]
    Infeasible { target: f64, asymptote: f64 },

    #[error("degenerate design: {0}")]
    DegenerateDesign(String),

    #[error("inference error: {0}")]
    Inference(String),

    #[error("engine error: {message}")]
    Engine { message: String, trace: Vec<String> },

    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
