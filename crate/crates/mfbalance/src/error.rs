use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    Parameter { name: &'static str, reason: String },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error(
        "calibration failed after {iterations} iterations: achieved H={achieved_h:.4} \
         dh={achieved_dh:.4}, targets H={target_h:.4} dh={target_dh:.4}"
    )]
    Calibration {
        iterations: usize,
        achieved_h: f64,
        achieved_dh: f64,
        target_h: f64,
        target_dh: f64,
    },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn parameter(name: &'static str, reason: impl Into<String>) -> Self {
        Error::Parameter {
            name,
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
