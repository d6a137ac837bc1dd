//! Text format for models: lexing, parsing with recovery, lowering to
//! validated models and canonical emission.

mod emit;
mod lexer;
mod lower;
mod parser;

use std::fmt;

pub use emit::{emit, emit_model};
pub use lower::{load_file, lower, lower_str, LowerOptions, Lowered};
pub use parser::{
    parse, parse_expr, Arg, Ast, ConstraintSpec, DistSpec, DomainSpec, Item, ItemKind, VarDecl,
};

/// Byte range plus the 1-based line and column of its start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub line: usize,
    pub col: usize,
}

impl Span {
    /// This span extended to end at byte `end`.
    pub fn to(self, end: usize) -> Span {
        Span {
            end: end.max(self.start),
            ..self
        }
    }

    /// Start of file.
    pub fn origin() -> Span {
        Span {
            start: 0,
            end: 0,
            line: 1,
            col: 1,
        }
    }
}

/// A diagnostic tied to a source location.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diag {
    pub span: Span,
    pub message: String,
}

impl Diag {
    pub fn new(span: Span, message: impl Into<String>) -> Diag {
        Diag {
            span,
            message: message.into(),
        }
    }
}

impl fmt::Display for Diag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}: {}", self.span.line, self.span.col, self.message)
    }
}
