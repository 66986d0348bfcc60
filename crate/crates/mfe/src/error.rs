use thiserror::Error;

#[derive(Debug, Error)]
pub enum MfeError {
    #[error("invalid input: {0}")]
    Invalid(String),
    /// A partial sum that appears in a denominator vanished.
    #[error("resonance: partial sum n[{from}..={to}] is zero")]
    Resonance { from: usize, to: usize },
    #[error("not resonant: total frequency sum is {0}")]
    NotResonant(i64),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("budget exceeded: {0}")]
    Budget(String),
    #[error("accuracy target not met: {0}")]
    Accuracy(String),
    #[error("fit refused: errors saturated at the numerical floor")]
    Saturated,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, MfeError>;
