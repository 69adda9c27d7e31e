//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("variable `{0}` is already declared")]
    DuplicateKey(String),
    #[error("variable `{0}` uses the reserved node-state prefix")]
    ReservedKey(String),
    #[error("syntax error at {location}: {message}")]
    Syntax { location: String, message: String },
    #[error("sibling nodes share the name `{0}`")]
    DuplicateName(String),
    #[error("division by zero{}", node_suffix(.node))]
    DivideByZero { node: Option<String> },
    #[error("tick queue budget of {budget} pops exhausted; the tree is likely cycling")]
    CycleBudgetExceeded { budget: usize },
    #[error("tree definition has validation errors: {0}")]
    Invalid(String),
    #[error("malformed variable dump: {0}")]
    MalformedDump(String),
    #[error("mission tree uses reserved synchronization key `{0}`")]
    ReservedSyncKey(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("replica {replica} failed at t={time}: {source}")]
    Replica {
        replica: u32,
        time: f64,
        #[source]
        source: Box<Error>,
    },
    #[error("engines disagree on sample {sample_index}: classical {classical} vs asynchronous {asynchronous}")]
    OracleMismatch {
        sample_index: usize,
        classical: String,
        asynchronous: String,
    },
}

fn node_suffix(node: &Option<String>) -> String {
    match node {
        Some(n) => format!(" in node `{n}`"),
        None => String::new(),
    }
}

pub type Result<T> = std::result::Result<T, Error>;
