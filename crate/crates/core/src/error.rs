use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("index {index} out of range for length {len} in {op}")]
    OutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("loss must be a scalar, got shape {rows}x{cols}")]
    NotScalar { rows: usize, cols: usize },
    #[error("computation graph already consumed by a backward pass")]
    GraphConsumed,
    #[error("empty input to {0}")]
    Empty(&'static str),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("function is not deterministic: {first} vs {second}")]
    NonDeterministic { first: f64, second: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("template error: {0}")]
    Template(String),
    #[error("word {0:?} is not in the vocabulary")]
    UnknownWord(String),
    #[error("sequence of length {len} exceeds max_len {max_len}")]
    TooLong { len: usize, max_len: usize },
    #[error("verbalizer error: {0}")]
    Verbalizer(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
