//! Constraint language: lexer, parser, canonical formatter and schema-aware
//! validation.

pub mod ast;
pub mod format;
pub mod lexer;
pub mod parser;
pub mod validate;

use thiserror::Error;

pub use ast::Span;
pub use format::format_program;
pub use parser::parse;
pub use validate::{validate, DownstreamSpec, Pred, TypedKind, TypedProgram, TypedSpec, TypedStat, ValidateError};

use crate::schema::Schema;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParseError {
    #[error("{span}: {message}")]
    Syntax { message: String, span: Span },
    #[error("{span}: more than one DIFFERENTIAL PRIVACY command")]
    DuplicateDp { span: Span },
    #[error("{span}: missing `END;`")]
    MissingEnd { span: Span },
    #[error("{span}: DIFFERENTIAL PRIVACY must be the first command")]
    MisplacedDp { span: Span },
}

impl ParseError {
    pub fn span(&self) -> Span {
        match self {
            ParseError::Syntax { span, .. }
            | ParseError::DuplicateDp { span }
            | ParseError::MissingEnd { span }
            | ParseError::MisplacedDp { span } => *span,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LangError {
    #[error("parse error at {0}")]
    Parse(#[from] ParseError),
    #[error("invalid program at {0}")]
    Validate(#[from] ValidateError),
}

/// Parses and validates in one step.
pub fn check(src: &str, schema: &Schema) -> Result<TypedProgram, LangError> {
    let program = parse(src)?;
    Ok(validate(&program, schema)?)
}
