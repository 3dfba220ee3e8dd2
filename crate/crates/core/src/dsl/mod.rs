//! The query language clients submit as stream specifications.
//!
//! ```text
//! where(b -> b.batch % 10 == 0) | map(b -> b.loss) | reduce(avg, x -> x) | window(count=5)
//! ```
//!
//! A query is a pipeline of `map`, `where`, one optional trailing `reduce`
//! and an optional `window`. Each stage binds a single name; inside the
//! stages that see the raw event, that name is the event record, and bare
//! identifiers other than the binder also resolve to observables.

mod ast;
mod eval;
mod lexer;
mod parser;

pub use ast::{Aggregator, BinaryOp, Builtin, Expr, FieldNeeds, Lambda, Pipeline, Stage, UnaryOp, WindowMode};
pub use eval::{compare_numbers, evaluate, values_equal, Scope, StageScope};
pub use parser::{parse, parse_expr, validate};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{line}:{column}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub column: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid pipeline: {0}")]
pub struct ValidationError(pub String);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum QueryError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Validation(#[from] ValidationError),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{message}")]
pub struct EvalError {
    pub message: String,
}

impl EvalError {
    pub fn new(message: impl Into<String>) -> Self {
        EvalError { message: message.into() }
    }
}
