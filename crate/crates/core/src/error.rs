use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A generator, pool, or experiment was configured inconsistently.
    #[error("configuration error: {0}")]
    Config(String),

    /// Perplexity/length filtering left nothing to draw from.
    #[error("filtered corpus is empty: {0}")]
    EmptyFilteredPool(String),

    /// Mismatched lengths, ids, or group sizes.
    #[error("structural error: {0}")]
    Structural(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("token {token} is outside the vocabulary of size {vocab_size}")]
    TokenOutOfVocab { token: usize, vocab_size: usize },

    #[error("enumeration of {size} sequences exceeds the budget of {budget}")]
    EnumerationBudget { size: u128, budget: u128 },

    #[error("undefined: {0}")]
    Undefined(String),

    #[error("unsupported model file version {0}")]
    Version(u32),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn structural(msg: impl Into<String>) -> Self {
        Error::Structural(msg.into())
    }
}
