//! Crate-wide error type.

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum DpmError {
    /// Tensor operation received non-conforming shapes.
    #[error("shape mismatch in {op}: {details}")]
    Shape { op: &'static str, details: String },

    /// A configuration value violates its documented invariant.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Token id, class label, or index outside its valid range.
    #[error("index out of range in {context}: {index} not in [0, {bound})")]
    IndexRange {
        context: &'static str,
        index: usize,
        bound: usize,
    },

    /// An input sequence does not fit the model's context window.
    #[error("window violation: need {needed} tokens but the window limit is {limit}{}",
            sentence.map(|s| format!(" (sentence {s})")).unwrap_or_default())]
    WindowViolation {
        needed: usize,
        limit: usize,
        sentence: Option<usize>,
    },

    /// Adapter lifecycle misuse (duplicate attach, discard of unknown adapter, ...).
    #[error("adapter lifecycle: {0}")]
    AdapterLifecycle(String),

    /// A data file is malformed. `record` is the 1-based record index when known.
    #[error("data format error{}: {msg}", record.map(|r| format!(" at record {r}")).unwrap_or_default())]
    DataFormat { record: Option<usize>, msg: String },

    /// Loss became non-finite during optimization.
    #[error("numerical abort: {context}")]
    NumericalAbort { context: String },

    /// Train/test splits share dialogue ids.
    #[error("split leakage: dialogue id {0} appears in both train and test splits")]
    SplitLeakage(u64),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DpmError>;
